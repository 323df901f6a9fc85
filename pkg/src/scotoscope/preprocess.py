"""From raw recordings to labelled fixed-length windows and subject-wise folds.

Pipeline per recording: :func:`resample` onto an exact 240 Hz grid,
:func:`discard_adaptation` (first minute), :func:`interpolate_gaps` with a
natural cubic spline, then :func:`segment` into windows that respect the
missing-data budget of their length. :func:`transplant_noise_masks` copies gap
patterns across classes and :func:`normalize_pp` divides by the subject mean.
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import (
    ConfigError,
    InsufficientData,
    InsufficientSubjects,
    IoError,
    MissingSubjectMean,
    NoDonorAvailable,
    ParseError,
    TooShort,
    ValidationError,
)
from .signal_io import LABELS, SAMPLING_HZ

ADAPTATION_S = 60
# maximum tolerated fraction of gap samples, by window length in seconds
MISSING_THRESHOLDS = {10: 0.10, 15: 0.10, 30: 0.15, 60: 0.20}
TRANSPLANT_ATTEMPTS = 10


@dataclass(eq=False)
class UniformSeries:
    values: np.ndarray
    gap_mask: np.ndarray  # True where the value is missing or was synthesized
    subject_id: str
    label: str
    hz: int = SAMPLING_HZ

    def __len__(self):
        return len(self.values)


@dataclass(eq=False)
class Window:
    values: np.ndarray
    gap_mask: np.ndarray
    missing_fraction: float
    subject_id: str
    label: str
    source_offset: int

    @property
    def n_sec(self):
        return len(self.values) / SAMPLING_HZ

    def __eq__(self, other):
        if not isinstance(other, Window):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.label == other.label
            and self.source_offset == other.source_offset
            and self.missing_fraction == other.missing_fraction
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.gap_mask, other.gap_mask)
        )

    def key(self):
        return (self.subject_id, self.source_offset)


def resample(recording):
    """Nearest-sample assignment onto an exact 240 Hz grid starting at t = 0.

    A grid point takes the raw sample nearest to it (earlier one on ties) if
    that sample lies within half an interval; otherwise, or if that sample is
    missing, the point is a gap (value NaN, mask True).
    """
    period = 1000.0 / SAMPLING_HZ
    t = recording.t_ms
    # tolerance so that a last sample exactly on the grid is not lost to rounding
    n = int(np.floor(t[-1] / period + 1e-9)) + 1
    grid = np.arange(n) * period
    right = np.clip(np.searchsorted(t, grid, side="left"), 0, len(t) - 1)
    left = np.clip(right - 1, 0, len(t) - 1)
    use_left = np.abs(grid - t[left]) <= np.abs(t[right] - grid)
    nearest = np.where(use_left, left, right)
    close = np.abs(t[nearest] - grid) <= period / 2
    values = np.where(close, recording.diameter[nearest], np.nan)
    gap = np.isnan(values)
    return UniformSeries(values, gap, recording.subject_id, recording.label)


def discard_adaptation(series):
    """Drop the first minute (14 400 samples at 240 Hz)."""
    n = ADAPTATION_S * series.hz
    if len(series) <= n:
        raise TooShort(f"{series.subject_id}: {len(series)} samples, need more than {n}")
    return replace(series, values=series.values[n:].copy(), gap_mask=series.gap_mask[n:].copy())


def _spline_fill(values, knots_mask, fill_mask):
    """Return a copy of ``values`` with ``fill_mask`` positions replaced by a
    natural cubic spline through the ``knots_mask`` positions. Fill positions
    before the first or after the last knot take that knot's value."""
    idx = np.flatnonzero(knots_mask)
    if len(idx) < 4:
        raise InsufficientData(f"only {len(idx)} valid samples, need at least 4")
    out = values.copy()
    targets = np.flatnonzero(fill_mask)
    if len(targets) == 0:
        return out
    lead = targets < idx[0]
    trail = targets > idx[-1]
    out[targets[lead]] = values[idx[0]]
    out[targets[trail]] = values[idx[-1]]
    inner = targets[~(lead | trail)]
    if len(inner):
        spline = CubicSpline(idx, values[idx], bc_type="natural")
        out[inner] = spline(inner)
    return out


def interpolate_gaps(series):
    """Fill gaps with a natural cubic spline through the non-gap samples.

    Leading and trailing gap runs are clamped to the nearest valid value. The
    gap mask is kept so that later stages know which values are synthetic.
    """
    values = _spline_fill(series.values, ~series.gap_mask, series.gap_mask)
    return replace(series, values=values, gap_mask=series.gap_mask.copy())


def prepare_series(recording):
    """resample -> discard_adaptation -> interpolate_gaps."""
    return interpolate_gaps(discard_adaptation(resample(recording)))


def subject_mean(series):
    """Mean of the originally observed (non-gap) samples."""
    observed = series.values[~series.gap_mask]
    if len(observed) == 0:
        raise InsufficientData(f"{series.subject_id}: no observed samples")
    return float(observed.mean())


def threshold_for(n_sec):
    try:
        return MISSING_THRESHOLDS[int(n_sec)]
    except (KeyError, ValueError):
        raise ConfigError(
            f"window length must be one of {sorted(MISSING_THRESHOLDS)} s, got {n_sec}"
        ) from None


def segment(series, n_sec):
    """Consecutive non-overlapping windows of ``n_sec`` seconds.

    Windows whose gap fraction exceeds the budget for their length are
    dropped, as is the trailing partial window.
    """
    threshold = threshold_for(n_sec)
    length = int(n_sec) * series.hz
    windows = []
    for k in range(len(series) // length):
        sl = slice(k * length, (k + 1) * length)
        mask = series.gap_mask[sl]
        frac = float(mask.mean())
        if frac > threshold:
            continue
        windows.append(
            Window(series.values[sl].copy(), mask.copy(), frac, series.subject_id, series.label, k * length)
        )
    return windows


def transplant_noise_masks(windows, series_bank, probability=0.5, seed=0, max_missing=None):
    """Superimpose gap patterns from the opposite class.

    Each window is picked with ``probability``. A donor series of the other
    class is chosen uniformly from ``series_bank`` (label -> list of
    UniformSeries) and, within it, an equal-length segment uniformly. Samples
    the donor marks missing are re-interpolated from the window's remaining
    observed samples. Draws that would push the gap fraction over
    ``max_missing`` (default: the budget for the window length) are redrawn
    up to ten times, after which the window is left as it was.
    """
    if any(not series_bank.get(label) for label in LABELS):
        raise NoDonorAvailable("series bank must hold series of both classes")
    rng = np.random.default_rng(seed)
    out = []
    for w in windows:
        if rng.random() >= probability:
            out.append(w)
            continue
        length = len(w.values)
        donors = [s for s in series_bank[LABELS[1 - LABELS.index(w.label)]] if len(s) >= length]
        if not donors:
            raise NoDonorAvailable(f"no donor series of at least {length} samples")
        limit = max_missing
        if limit is None:
            limit = MISSING_THRESHOLDS.get(length // SAMPLING_HZ, 1.0)
        for _ in range(TRANSPLANT_ATTEMPTS):
            donor = donors[rng.integers(len(donors))]
            offset = rng.integers(len(donor) - length + 1)
            donor_mask = donor.gap_mask[offset : offset + length]
            union = w.gap_mask | donor_mask
            if union.mean() <= limit:
                break
        else:
            out.append(w)
            continue
        if not donor_mask.any():
            out.append(w)
            continue
        values = _spline_fill(w.values, ~union, donor_mask)
        out.append(replace(w, values=values, gap_mask=union, missing_fraction=float(union.mean())))
    return out


def normalize_pp(windows, per_subject_mean):
    """Divide every window by its subject's mean pupil size."""
    out = []
    for w in windows:
        try:
            mean = per_subject_mean[w.subject_id]
        except KeyError:
            raise MissingSubjectMean(f"no mean for subject {w.subject_id!r}") from None
        if not mean > 0:
            raise ValidationError(f"subject {w.subject_id!r} has non-positive mean {mean}")
        out.append(replace(w, values=w.values / mean))
    return out


def shuffle_windows(windows, seed):
    order = np.random.default_rng(seed).permutation(len(windows))
    return [windows[i] for i in order]


# ----------------------------------------------------------------------------
# Folds
# ----------------------------------------------------------------------------


@dataclass
class Fold:
    train: list
    val: list
    test: list


@dataclass
class FoldPlan:
    k: int
    folds: list

    def to_json(self):
        return json.dumps(
            {"k": self.k, "folds": [{"train": f.train, "val": f.val, "test": f.test} for f in self.folds]},
            indent=1,
        )

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
            plan = cls(int(data["k"]), [Fold(list(f["train"]), list(f["val"]), list(f["test"])) for f in data["folds"]])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"invalid fold plan: {exc}") from exc
        if len(plan.folds) != plan.k:
            raise ParseError(f"fold plan declares k={plan.k} but has {len(plan.folds)} folds")
        for f in plan.folds:
            if set(f.train) & set(f.val) or set(f.train) & set(f.test) or set(f.val) & set(f.test):
                raise ValidationError("fold plan has a subject in two sets of the same fold")
        return plan

    def save(self, path):
        try:
            Path(path).write_text(self.to_json() + "\n", encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot write fold plan: {exc}") from exc

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot read fold plan: {exc}") from exc
        return cls.from_json(text)


def make_folds(subjects, seed, k=5):
    """Subject-wise k-fold plan with class-balanced validation and test sets.

    ``subjects`` is a Dataset or a mapping subject id -> label. Per class,
    validation and test each receive ``m = min over classes of
    floor(n_class / k)`` subjects, so 21 HC + 15 PD gives 24/6/6 and 5 + 5
    gives 6/2/2. Fold ``i`` tests block ``i`` and validates on block ``i + 1``
    (cyclically) of each class's shuffled subject list.
    """
    labels = subjects.labels() if hasattr(subjects, "labels") else dict(subjects)
    by_class = {c: sorted(s for s, lab in labels.items() if lab == c) for c in LABELS}
    short = {c: len(v) for c, v in by_class.items() if len(v) < k}
    if short:
        raise InsufficientSubjects(f"need at least {k} subjects per class, have {short}")
    m = min(len(v) // k for v in by_class.values())
    rng = np.random.default_rng(seed)
    order = {c: [by_class[c][i] for i in rng.permutation(len(by_class[c]))] for c in LABELS}

    def block(c, i):
        return order[c][i * m : (i + 1) * m]

    folds = []
    for i in range(k):
        test = sorted(s for c in LABELS for s in block(c, i))
        val = sorted(s for c in LABELS for s in block(c, (i + 1) % k))
        held = set(test) | set(val)
        train = sorted(s for s in labels if s not in held)
        folds.append(Fold(train, val, test))
    return FoldPlan(k, folds)


# ----------------------------------------------------------------------------
# Window files
# ----------------------------------------------------------------------------


def save_windows(directory, windows, subject_means=None, meta=None):
    """Write windows as ``values.f64`` (little-endian, row-major),
    ``gap_mask.u8`` and an ``index.json`` with per-window metadata."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        length = len(windows[0].values) if windows else 0
        if any(len(w.values) != length for w in windows):
            raise ValidationError("windows differ in length")
        values = np.stack([w.values for w in windows]) if windows else np.zeros((0, 0))
        masks = np.stack([w.gap_mask for w in windows]) if windows else np.zeros((0, 0), bool)
        values.astype("<f8").tofile(directory / "values.f64")
        masks.astype(np.uint8).tofile(directory / "gap_mask.u8")
        index = {
            "length": length,
            "hz": SAMPLING_HZ,
            "count": len(windows),
            "subject_means": subject_means or {},
            "windows": [
                {
                    "subject_id": w.subject_id,
                    "label": w.label,
                    "source_offset": w.source_offset,
                    "missing_fraction": w.missing_fraction,
                }
                for w in windows
            ],
        }
        index.update(meta or {})
        (directory / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write windows to {directory}: {exc}") from exc


def load_windows(directory):
    """Inverse of :func:`save_windows`; returns ``(windows, index)``."""
    directory = Path(directory)
    try:
        index = json.loads((directory / "index.json").read_text(encoding="utf-8"))
        n, length = index["count"], index["length"]
        values = np.fromfile(directory / "values.f64", dtype="<f8")
        masks = np.fromfile(directory / "gap_mask.u8", dtype=np.uint8)
    except OSError as exc:
        raise IoError(f"cannot read windows from {directory}: {exc}") from exc
    except (json.JSONDecodeError, KeyError) as exc:
        raise ParseError(f"invalid window index: {exc}", path=str(directory / "index.json")) from exc
    if values.size != n * length or masks.size != n * length:
        raise ParseError("window payload size does not match index", path=str(directory))
    values = values.reshape(n, length)
    masks = masks.reshape(n, length).astype(bool)
    windows = [
        Window(values[i].copy(), masks[i].copy(), float(m["missing_fraction"]), m["subject_id"], m["label"], int(m["source_offset"]))
        for i, m in enumerate(index["windows"])
    ]
    return windows, index
