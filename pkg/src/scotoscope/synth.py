"""Seeded two-class synthetic pupil recordings.

Each recording is a per-subject baseline plus a smooth low-pass drift, a
sinusoidal oscillation at the class frequency, brief raised-cosine
transients and white noise, sampled on a jittered ~240 Hz clock. Blinks and track losses blank out runs
of samples. Subject ``i`` is drawn from its own generator seeded with
``(seed, i)``, so recordings can be produced in any order or in parallel.

The model is deliberately simple. Its only job is to give the classifiers a
learnable class difference with realistic gaps and inter-subject spread.
"""

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigError
from .kvconfig import format_kv, to_float, to_int, to_range
from .signal_io import LABELS, SAMPLING_HZ, Dataset, Recording

DRIFT_TIME_CONSTANT_S = 5.0
JITTER_FRACTION = 0.10
# final floor that keeps every synthesized diameter strictly positive
MIN_DIAMETER_MM = 0.5


@dataclass(frozen=True)
class ClassParams:
    baseline_mm: float
    oscillation_amplitude_mm: float
    oscillation_hz: float
    drift_scale: float
    noise_std_mm: float
    # spread of the per-subject baseline, as a standard deviation in log space
    baseline_log_sd: float = 0.0
    # oscillation phase at t = 0 and its spread across subjects
    phase_rad: float = 0.0
    phase_sd_rad: float = 0.0
    # brief raised-cosine excursions at Poisson-random times; a positive
    # amplitude is a dilation, a negative one a constriction
    transient_rate_per_min: float = 0.0
    transient_amplitude_mm: float = 0.0
    transient_duration_ms: float = 300.0


@dataclass(frozen=True)
class GapParams:
    blink_rate_per_min: float = 12.0
    blink_duration_ms_range: tuple = (100.0, 300.0)
    trackloss_rate_per_min: float = 0.5
    trackloss_duration_ms_range: tuple = (300.0, 1000.0)


@dataclass(frozen=True)
class SynthConfig:
    n_subjects_per_class: int
    class_params: dict  # label -> ClassParams
    gap_params: GapParams = field(default_factory=GapParams)
    duration_s: float = 660.0
    seed: int = 0

    def validate(self):
        if self.n_subjects_per_class < 1:
            raise ConfigError("n_subjects_per_class must be at least 1")
        if self.duration_s * 1000 < 60_000:
            raise ConfigError("duration_s must cover at least the 60 s adaptation period")
        if set(self.class_params) != set(LABELS):
            raise ConfigError(f"class_params needs exactly the classes {LABELS}")
        for label, p in self.class_params.items():
            for f in fields(p):
                v = getattr(p, f.name)
                if f.name not in ("phase_rad", "transient_amplitude_mm") and v < 0:
                    raise ConfigError(f"{label}.{f.name} must be non-negative")
            if p.baseline_mm <= p.oscillation_amplitude_mm:
                raise ConfigError(f"{label}: baseline_mm must exceed oscillation_amplitude_mm")
        g = self.gap_params
        for name in ("blink_rate_per_min", "trackloss_rate_per_min"):
            if getattr(g, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("blink_duration_ms_range", "trackloss_duration_ms_range"):
            lo, hi = getattr(g, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name} must satisfy 0 <= low <= high")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return self

    def to_mapping(self):
        """Flat ``key -> str`` form, the inverse of :func:`config_from_mapping`."""
        out = {
            "n_subjects_per_class": str(self.n_subjects_per_class),
            "duration_s": repr(float(self.duration_s)),
            "seed": str(self.seed),
        }
        for label in LABELS:
            for k, v in asdict(self.class_params[label]).items():
                out[f"{label}.{k}"] = repr(float(v))
        for k, v in asdict(self.gap_params).items():
            out[k] = f"{v[0]!r}, {v[1]!r}" if isinstance(v, tuple) else repr(float(v))
        return out

    def to_text(self):
        return format_kv(self.to_mapping())


def config_from_mapping(mapping, base=None):
    """Build a config from ``key -> str`` pairs on top of ``base``.

    Keys are the field names of :class:`SynthConfig` and :class:`GapParams`,
    and ``HC.<field>`` / ``PD.<field>`` for :class:`ClassParams`.
    """
    cfg = base if base is not None else default_separable_config(0)
    top, gap = {}, {}
    cls = {label: {} for label in LABELS}
    class_fields = {f.name for f in fields(ClassParams)}
    gap_fields = {f.name for f in fields(GapParams)}
    for key, value in mapping.items():
        if "." in key:
            label, name = key.split(".", 1)
            if label not in cls or name not in class_fields:
                raise ConfigError(f"unknown synthetic config key {key!r}")
            cls[label][name] = to_float(key, value)
        elif key in gap_fields:
            gap[key] = to_range(key, value) if key.endswith("_range") else to_float(key, value)
        elif key in ("n_subjects_per_class", "seed"):
            top[key] = to_int(key, value)
        elif key == "duration_s":
            top[key] = to_float(key, value)
        else:
            raise ConfigError(f"unknown synthetic config key {key!r}")
    class_params = {label: replace(cfg.class_params[label], **cls[label]) for label in LABELS}
    return replace(
        cfg, class_params=class_params, gap_params=replace(cfg.gap_params, **gap), **top
    ).validate()


def default_separable_config(seed, n_subjects_per_class=20):
    """Two classes that the 1D-CNN separates reliably.

    The class cue is the sign of frequent brief transients: HC recordings
    carry 300 ms dilations, PD recordings constrictions of the same size,
    rate and shape. The HC baseline sits lower (5.24 mm vs 5.56 mm) by
    the transients' mean contribution, so both classes share a mean diameter
    of about 5.40 mm and mostly the shape of the signal differs.
    A weaker oscillation (0.4 Hz for HC, 1.2 Hz for PD, with a shared class
    phase spread across subjects) leaves the class-average waveforms a
    visible difference for the normative-graph baselines.
    """
    shared = dict(
        oscillation_amplitude_mm=0.10, drift_scale=0.03, noise_std_mm=0.003,
        baseline_log_sd=0.02, phase_rad=0.0, phase_sd_rad=1.0,
        transient_rate_per_min=90.0, transient_duration_ms=300.0,
    )
    return SynthConfig(
        n_subjects_per_class=n_subjects_per_class,
        class_params={
            "HC": ClassParams(baseline_mm=5.24, oscillation_hz=0.4, transient_amplitude_mm=0.7, **shared),
            "PD": ClassParams(baseline_mm=5.56, oscillation_hz=1.2, transient_amplitude_mm=-0.7, **shared),
        },
        gap_params=GapParams(),
        duration_s=660.0,
        seed=seed,
    ).validate()


def high_variance_config(seed, n_subjects_per_class=20, baseline_log_sd=0.05):
    """:func:`default_separable_config` with a wider per-subject baseline
    spread (2.5 times the default), the regime where dividing by the subject
    mean is meant to help."""
    base = default_separable_config(seed, n_subjects_per_class)
    params = {
        label: replace(p, baseline_log_sd=baseline_log_sd) for label, p in base.class_params.items()
    }
    return replace(base, class_params=params).validate()


def _gap_mask(t_ms, rate_per_min, duration_range, rng):
    mask = np.zeros(len(t_ms), dtype=bool)
    total_ms = t_ms[-1]
    n_events = rng.poisson(rate_per_min * total_ms / 60_000.0) if rate_per_min > 0 else 0
    starts = rng.uniform(0, total_ms, size=n_events)
    durations = rng.uniform(duration_range[0], duration_range[1], size=n_events)
    lo = np.searchsorted(t_ms, starts, side="left")
    hi = np.searchsorted(t_ms, starts + durations, side="right")
    for a, b in zip(lo, hi):
        mask[a:b] = True
    return mask


def _transients(t_ms, rate_per_min, amplitude_mm, duration_ms, rng):
    out = np.zeros(len(t_ms))
    n_events = rng.poisson(rate_per_min * t_ms[-1] / 60_000.0) if rate_per_min > 0 else 0
    for start in rng.uniform(0, t_ms[-1], size=n_events):
        lo, hi = np.searchsorted(t_ms, [start, start + duration_ms])
        phase = (t_ms[lo:hi] - start) / duration_ms
        out[lo:hi] += amplitude_mm * 0.5 * (1.0 - np.cos(2 * np.pi * phase))
    return out


def generate_recording(config, index, subject_id, label):
    """One recording; depends only on ``(config, index)``."""
    rng = np.random.default_rng([config.seed, index])
    p = config.class_params[label]
    g = config.gap_params
    period_ms = 1000.0 / SAMPLING_HZ
    n = int(round(config.duration_s * SAMPLING_HZ)) + 1

    jitter = rng.uniform(-JITTER_FRACTION, JITTER_FRACTION, size=n) * period_ms
    jitter[0] = 0.0
    t_ms = np.arange(n) * period_ms + jitter

    baseline = p.baseline_mm * np.exp(p.baseline_log_sd * rng.standard_normal())
    phase = p.phase_rad + p.phase_sd_rad * rng.standard_normal()

    # double-pole low-pass drift, smooth at the sample scale so that spline
    # filling across gaps stays well behaved; stationary sd = drift_scale
    a = np.exp(-1.0 / (DRIFT_TIME_CONSTANT_S * SAMPLING_HZ))
    burn = int(5 * DRIFT_TIME_CONSTANT_S * SAMPLING_HZ)
    gain = p.drift_scale * np.sqrt((1.0 - a * a) ** 3 / (1.0 + a * a))
    shocks = rng.standard_normal(n + burn) * gain
    drift = lfilter([1.0], [1.0, -2.0 * a, a * a], shocks)[burn:]

    transients = _transients(t_ms, p.transient_rate_per_min, p.transient_amplitude_mm, p.transient_duration_ms, rng)
    noise = p.noise_std_mm * rng.standard_normal(n)
    osc = p.oscillation_amplitude_mm * np.sin(2 * np.pi * p.oscillation_hz * t_ms / 1000.0 + phase)
    diameter = np.maximum(baseline + drift + osc + transients + noise, MIN_DIAMETER_MM)

    missing = _gap_mask(t_ms, g.blink_rate_per_min, g.blink_duration_ms_range, rng)
    missing |= _gap_mask(t_ms, g.trackloss_rate_per_min, g.trackloss_duration_ms_range, rng)
    diameter[missing] = np.nan
    return Recording(subject_id, label, t_ms, diameter)


def subject_ids(config):
    n = config.n_subjects_per_class
    width = max(3, len(str(2 * n)))
    return [
        (i, f"sub-{i + 1:0{width}d}", LABELS[i // n]) for i in range(2 * n)
    ]


def generate_dataset(config):
    """Generate ``2 * n_subjects_per_class`` recordings, HC first then PD."""
    config.validate()
    recordings = [generate_recording(config, i, sid, label) for i, sid, label in subject_ids(config)]
    return Dataset(recordings).validate()
