from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scotoscope import synth
from scotoscope.errors import ConfigError
from scotoscope.kvconfig import parse_kv


def _small(seed=1, **changes):
    cfg = replace(synth.default_separable_config(seed, n_subjects_per_class=2), duration_s=90.0)
    return replace(cfg, **changes).validate()


def _quiet(cfg):
    params = {
        label: replace(p, oscillation_amplitude_mm=0.0, drift_scale=0.0, noise_std_mm=0.0,
                       baseline_log_sd=0.0, transient_rate_per_min=0.0)
        for label, p in cfg.class_params.items()
    }
    gaps = synth.GapParams(blink_rate_per_min=0.0, trackloss_rate_per_min=0.0)
    return replace(cfg, class_params=params, gap_params=gaps).validate()


def test_same_seed_same_dataset():
    assert synth.generate_dataset(_small(1)) == synth.generate_dataset(_small(1))


def test_different_seed_differs():
    a = synth.generate_dataset(_small(1)).recordings[0]
    b = synth.generate_dataset(_small(2)).recordings[0]
    assert a != b


def test_degenerate_parameters_give_constant_baseline():
    cfg = _quiet(_small())
    for rec in synth.generate_dataset(cfg).recordings:
        np.testing.assert_array_equal(rec.diameter, cfg.class_params[rec.label].baseline_mm)


def test_no_gap_rates_means_no_missing():
    cfg = replace(_small(), gap_params=synth.GapParams(blink_rate_per_min=0.0, trackloss_rate_per_min=0.0))
    for rec in synth.generate_dataset(cfg).recordings:
        assert not rec.missing.any()


def test_sampling_clock_is_jittered_240hz():
    rec = synth.generate_dataset(_small()).recordings[0]
    steps = np.diff(rec.t_ms)
    assert steps.min() > 0
    assert abs(steps.mean() - 1000 / 240) < 1e-3
    assert steps.std() > 0


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**64 - 1))
def test_observed_diameters_positive(seed):
    rec = synth.generate_recording(_small(seed), 3, "s", "PD")
    present = rec.diameter[~rec.missing]
    assert present.size and np.all(present > 0)


def test_default_config_contract():
    cfg = synth.default_separable_config(7)
    hc, pd = cfg.class_params["HC"], cfg.class_params["PD"]
    assert hc.oscillation_hz != pd.oscillation_hz
    assert hc.baseline_mm != pd.baseline_mm
    assert cfg.validate() is cfg


def test_default_dataset_size():
    cfg = replace(synth.default_separable_config(7, n_subjects_per_class=3), duration_s=70.0)
    ds = synth.generate_dataset(cfg)
    assert len(ds.recordings) == 6
    assert [r.label for r in ds.recordings] == ["HC"] * 3 + ["PD"] * 3


def test_default_classes_share_mean_diameter():
    # the transients' mean contribution cancels the baseline offset to 5 um
    cfg = synth.default_separable_config(0)
    means = {}
    for label, p in cfg.class_params.items():
        pulse_mean = p.transient_rate_per_min / 60 * p.transient_amplitude_mm / 2 * p.transient_duration_ms / 1000
        means[label] = p.baseline_mm + pulse_mean
    assert means["HC"] == pytest.approx(means["PD"], abs=0.01)


def test_high_variance_widens_spread_only():
    base = synth.default_separable_config(3)
    high = synth.high_variance_config(3)
    for label in ("HC", "PD"):
        assert high.class_params[label].baseline_log_sd > base.class_params[label].baseline_log_sd
        assert replace(high.class_params[label], baseline_log_sd=0.0) == replace(base.class_params[label], baseline_log_sd=0.0)


def test_recordings_independent_of_order():
    cfg = _small(5)
    ds = synth.generate_dataset(cfg)
    assert synth.generate_recording(cfg, 2, "sub-003", "PD") == ds.recordings[2]


def test_config_text_round_trip():
    cfg = synth.high_variance_config(11)
    back = synth.config_from_mapping(parse_kv(cfg.to_text()))
    assert back == cfg


@pytest.mark.parametrize(
    "mapping",
    [
        {"n_subjects_per_class": "0"},
        {"duration_s": "30"},
        {"HC.noise_std_mm": "-1"},
        {"HC.baseline_mm": "0.05"},
        {"XX.baseline_mm": "4"},
        {"unknown": "1"},
        {"blink_duration_ms_range": "300, 100"},
    ],
)
def test_invalid_config(mapping):
    with pytest.raises(ConfigError):
        synth.config_from_mapping(mapping)
