import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scotoscope import preprocess as pp
from scotoscope.errors import (
    ConfigError,
    InsufficientData,
    InsufficientSubjects,
    MissingSubjectMean,
    NoDonorAvailable,
    ParseError,
    TooShort,
    ValidationError,
)
from scotoscope.signal_io import Recording

from oracles import natural_spline

PERIOD = 1000 / 240


def _series(values, gaps=None, sid="s1", label="HC"):
    values = np.asarray(values, dtype=float).copy()
    mask = np.zeros(len(values), bool) if gaps is None else np.asarray(gaps, bool)
    values[mask] = np.nan
    return pp.UniformSeries(values, mask, sid, label)


def _window(values, sid="s1", label="HC", offset=0, gaps=None):
    values = np.asarray(values, dtype=float)
    mask = np.zeros(len(values), bool) if gaps is None else np.asarray(gaps, bool)
    return pp.Window(values, mask, float(mask.mean()), sid, label, offset)


# --- resampling ------------------------------------------------------------


def test_resample_on_grid_is_identity():
    t = np.arange(1000) * PERIOD
    d = 4 + np.sin(t / 50)
    out = pp.resample(Recording("s", "HC", t, d))
    np.testing.assert_array_equal(out.values, d)
    assert not out.gap_mask.any()


def test_resample_marks_missing_sample():
    t = np.arange(100) * PERIOD
    d = np.full(100, 4.0)
    d[37] = np.nan
    out = pp.resample(Recording("s", "HC", t, d))
    np.testing.assert_array_equal(np.flatnonzero(out.gap_mask), [37])


def test_resample_hole_of_200_ms():
    # 200 ms without samples is 48 missing sample slots at 240 Hz
    t = np.arange(2400) * PERIOD
    keep = np.ones(2400, bool)
    keep[500:548] = False
    t = t[keep]
    out = pp.resample(Recording("s", "HC", t, np.full(len(t), 4.0)))
    np.testing.assert_array_equal(np.flatnonzero(out.gap_mask), np.arange(500, 548))


def test_resample_jittered_clock():
    rng = np.random.default_rng(0)
    t = np.arange(5000) * PERIOD + rng.uniform(-0.4, 0.4, 5000)
    t[0] = 0
    out = pp.resample(Recording("s", "HC", t, np.full(5000, 3.0)))
    assert not out.gap_mask.any()
    assert len(out) == int(t[-1] // PERIOD) + 1


# --- adaptation --------------------------------------------------------------


def test_discard_adaptation_660_to_600_s():
    out = pp.discard_adaptation(_series(np.ones(660 * 240)))
    assert len(out) == 600 * 240


def test_discard_adaptation_61_s():
    values = np.arange(61 * 240, dtype=float)
    out = pp.discard_adaptation(_series(values))
    assert len(out) == 240
    np.testing.assert_array_equal(out.values, values[-240:])


def test_discard_adaptation_too_short():
    with pytest.raises(TooShort):
        pp.discard_adaptation(_series(np.ones(59 * 240)))


# --- spline ----------------------------------------------------------------


def test_interpolate_no_gaps_is_identity():
    s = _series(np.random.default_rng(0).normal(size=50))
    np.testing.assert_array_equal(pp.interpolate_gaps(s).values, s.values)


def test_interpolate_linear_exact():
    x = np.arange(300, dtype=float)
    f = 2.5 - 0.013 * x
    gaps = np.zeros(300, bool)
    gaps[[3, 4, 50, 51, 52, 200]] = True
    gaps[120:160] = True
    out = pp.interpolate_gaps(_series(f, gaps)).values
    np.testing.assert_allclose(out, f, rtol=0, atol=1e-12)


def test_interpolate_cubic_interior():
    x = np.arange(400, dtype=float)
    f = (x / 100) ** 3 + 0.5
    gaps = np.zeros(400, bool)
    gaps[195:210] = True
    out = pp.interpolate_gaps(_series(f, gaps)).values
    np.testing.assert_allclose(out[gaps], f[gaps], rtol=1e-9)


def test_interpolate_matches_independent_spline():
    rng = np.random.default_rng(8)
    f = np.cumsum(rng.normal(size=120))
    gaps = rng.random(120) < 0.2
    gaps[[0, -1]] = False
    out = pp.interpolate_gaps(_series(f, gaps)).values
    knots = np.flatnonzero(~gaps)
    expected = natural_spline(knots, f[knots], np.flatnonzero(gaps))
    np.testing.assert_allclose(out[gaps], expected, rtol=1e-10, atol=1e-10)


def test_interpolate_clamps_edges():
    gaps = np.zeros(20, bool)
    gaps[:3] = gaps[-2:] = True
    f = np.arange(20, dtype=float)
    out = pp.interpolate_gaps(_series(f, gaps)).values
    np.testing.assert_array_equal(out[:3], 3.0)
    np.testing.assert_array_equal(out[-2:], 17.0)


def test_interpolate_keeps_mask():
    gaps = np.zeros(20, bool)
    gaps[5:8] = True
    out = pp.interpolate_gaps(_series(np.arange(20.0), gaps))
    np.testing.assert_array_equal(out.gap_mask, gaps)


def test_interpolate_needs_four_knots():
    with pytest.raises(InsufficientData):
        pp.interpolate_gaps(_series(np.ones(10), np.arange(10) > 2))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), frac=st.floats(0.0, 0.6))
def test_interpolate_idempotent(seed, frac):
    rng = np.random.default_rng(seed)
    gaps = rng.random(80) < frac
    if (~gaps).sum() < 4:
        gaps[:4] = False
    once = pp.interpolate_gaps(_series(rng.normal(size=80), gaps))
    twice = pp.interpolate_gaps(once)
    np.testing.assert_array_equal(twice.values, once.values)


# --- segmentation ------------------------------------------------------------


def test_segment_count_10s():
    assert len(pp.segment(_series(np.ones(600 * 240)), 10)) == 60


def test_segment_drops_remainder():
    wins = pp.segment(_series(np.ones(605 * 240)), 30)
    assert len(wins) == 20
    assert [w.source_offset for w in wins[:2]] == [0, 30 * 240]


def test_segment_drops_window_over_budget():
    gaps = np.zeros(600 * 240, bool)
    gaps[60 * 240 : 60 * 240 + int(0.21 * 60 * 240)] = True
    series = pp.interpolate_gaps(_series(np.linspace(3, 4, len(gaps)), gaps))
    wins = pp.segment(series, 60)
    assert len(wins) == 9
    assert 60 * 240 not in [w.source_offset for w in wins]


def test_segment_keeps_window_at_budget():
    gaps = np.zeros(20 * 240, bool)
    gaps[: int(0.10 * 10 * 240)] = True
    series = pp.interpolate_gaps(_series(np.ones(len(gaps)) * 4, gaps))
    wins = pp.segment(series, 10)
    assert len(wins) == 2
    assert wins[0].missing_fraction == pytest.approx(0.10)


def test_segment_unknown_length():
    with pytest.raises(ConfigError):
        pp.segment(_series(np.ones(10_000)), 20)


# --- noise-mask transplantation ----------------------------------------------


def _bank(mask_hc=None, mask_pd=None, n=2400):
    def donor(mask, label):
        mask = np.zeros(n, bool) if mask is None else mask
        return pp.interpolate_gaps(_series(np.full(n, 5.0), mask, sid="d" + label, label=label))

    return {"HC": [donor(mask_hc, "HC")], "PD": [donor(mask_pd, "PD")]}


def _sine_windows():
    t = np.arange(2400)
    return [
        _window(4 + 0.3 * np.sin(t / 37), "a", "HC"),
        _window(5 + 0.2 * np.cos(t / 23), "b", "PD"),
    ]


def test_transplant_probability_zero():
    wins = _sine_windows()
    assert pp.transplant_noise_masks(wins, _bank(), 0.0, seed=1) == wins


def test_transplant_empty_donor_mask_changes_nothing():
    wins = _sine_windows()
    assert pp.transplant_noise_masks(wins, _bank(), 1.0, seed=1) == wins


def test_transplant_changes_only_inside_run():
    run = np.zeros(2400, bool)
    run[1000:1100] = True
    # donors masked everywhere in the run: any offset in a 2400-sample donor is 0
    wins = _sine_windows()
    out = pp.transplant_noise_masks(wins, _bank(run, run), 1.0, seed=3)
    for before, after in zip(wins, out):
        changed = before.values != after.values
        assert changed.any()
        assert not changed[~run].any()
        np.testing.assert_array_equal(after.gap_mask, run)
        assert after.missing_fraction == pytest.approx(100 / 2400)


def test_transplant_uses_opposite_class():
    hc_run = np.zeros(2400, bool)
    hc_run[10:20] = True
    wins = [_window(np.linspace(4, 5, 2400), "b", "PD")]
    out = pp.transplant_noise_masks(wins, _bank(mask_hc=hc_run), 1.0, seed=0)
    np.testing.assert_array_equal(out[0].gap_mask, hc_run)


def test_transplant_respects_budget():
    heavy = np.zeros(2400, bool)
    heavy[:600] = True
    wins = _sine_windows()
    out = pp.transplant_noise_masks(wins, _bank(heavy, heavy), 1.0, seed=0)
    assert out == wins


def test_transplant_needs_both_classes():
    with pytest.raises(NoDonorAvailable):
        pp.transplant_noise_masks(_sine_windows(), {"HC": _bank()["HC"]}, 1.0)


# --- normalization -------------------------------------------------------------


def test_normalize_constant():
    out = pp.normalize_pp([_window(np.full(5, 4.0))], {"s1": 4.0})
    np.testing.assert_array_equal(out[0].values, 1.0)


def test_normalize_example():
    out = pp.normalize_pp([_window([3.0, 5.0])], {"s1": 4.0})
    np.testing.assert_array_equal(out[0].values, [0.75, 1.25])


def test_normalize_missing_subject():
    with pytest.raises(MissingSubjectMean):
        pp.normalize_pp([_window([3.0, 5.0], sid="zz")], {"s1": 4.0})


def test_subject_mean_ignores_gaps():
    s = pp.interpolate_gaps(_series([1.0, 2.0, 100.0, 3.0, 4.0, 5.0], [False, False, True, False, False, False]))
    assert pp.subject_mean(s) == pytest.approx(3.0)


# --- shuffling and folds ---------------------------------------------------------


def test_shuffle_empty():
    assert pp.shuffle_windows([], 0) == []


def test_shuffle_deterministic():
    wins = [_window([float(i)], offset=i) for i in range(20)]
    a = pp.shuffle_windows(wins, 5)
    assert a == pp.shuffle_windows(wins, 5)
    assert sorted(w.source_offset for w in a) == list(range(20))


def _subjects(n_hc, n_pd):
    return {**{f"h{i:02d}": "HC" for i in range(n_hc)}, **{f"p{i:02d}": "PD" for i in range(n_pd)}}


def test_folds_paper_protocol():
    labels = _subjects(21, 15)
    plan = pp.make_folds(labels, seed=0)
    for fold in plan.folds:
        assert (len(fold.train), len(fold.val), len(fold.test)) == (24, 6, 6)
        for part in (fold.val, fold.test):
            assert sorted(labels[s] for s in part) == ["HC"] * 3 + ["PD"] * 3


def test_folds_ten_subjects():
    labels = _subjects(5, 5)
    for fold in pp.make_folds(labels, seed=4).folds:
        assert (len(fold.train), len(fold.val), len(fold.test)) == (6, 2, 2)
        assert sorted(labels[s] for s in fold.test) == ["HC", "PD"]


def test_folds_too_few_subjects():
    with pytest.raises(InsufficientSubjects):
        pp.make_folds(_subjects(2, 2), seed=0)


@settings(max_examples=25, deadline=None)
@given(n_hc=st.integers(5, 25), n_pd=st.integers(5, 25), k=st.integers(2, 5), seed=st.integers(0, 1000))
def test_folds_partition_subjects(n_hc, n_pd, k, seed):
    labels = _subjects(n_hc, n_pd)
    plan = pp.make_folds(labels, seed, k)
    tested = []
    for fold in plan.folds:
        parts = [set(fold.train), set(fold.val), set(fold.test)]
        assert set().union(*parts) == set(labels)
        assert sum(map(len, parts)) == len(labels)
        tested += fold.test
    assert len(tested) == len(set(tested))


def test_fold_plan_json_round_trip(tmp_path):
    plan = pp.make_folds(_subjects(6, 7), seed=2)
    plan.save(tmp_path / "folds.json")
    assert pp.FoldPlan.load(tmp_path / "folds.json") == plan


def test_fold_plan_rejects_overlap():
    text = '{"k": 1, "folds": [{"train": ["a"], "val": ["a"], "test": ["b"]}]}'
    with pytest.raises(ValidationError):
        pp.FoldPlan.from_json(text)
    with pytest.raises(ParseError):
        pp.FoldPlan.from_json("{")


def test_windows_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    gaps = rng.random(240 * 10) < 0.05
    wins = [_window(rng.normal(size=2400), "a", "HC", 0, gaps), _window(rng.normal(size=2400), "b", "PD", 2400)]
    pp.save_windows(tmp_path / "w", wins, {"a": 4.0, "b": 5.0}, {"window_sec": 10})
    back, index = pp.load_windows(tmp_path / "w")
    assert back == wins
    assert index["subject_means"] == {"a": 4.0, "b": 5.0}
    assert index["window_sec"] == 10
