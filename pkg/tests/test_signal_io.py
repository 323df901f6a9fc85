import numpy as np
import pytest

from scotoscope.errors import EmptyDataset, IoError, ParseError, ValidationError
from scotoscope.signal_io import Dataset, Recording, load_dataset, read_recording, save_dataset


def _recording(subject_id, label, n=15_000, period=1000 / 240, level=4.0):
    t = np.arange(n) * period
    d = level + 0.1 * np.sin(t / 700.0)
    d[100:130] = np.nan
    return Recording(subject_id, label, t, d)


def _write_csv(path, rows):
    path.write_text("t_ms,diameter_mm\n" + "".join(f"{r}\n" for r in rows))


@pytest.fixture
def pair():
    return Dataset([_recording("s1", "HC"), _recording("s2", "PD", level=5.0)])


def test_round_trip(tmp_path, pair):
    save_dataset(pair, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert back == pair
    assert back.labels() == {"s1": "HC", "s2": "PD"}


def test_load_via_manifest_file(tmp_path, pair):
    save_dataset(pair, tmp_path / "ds")
    assert len(load_dataset(tmp_path / "ds" / "manifest.csv").recordings) == 2


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "r.csv"
    _write_csv(path, ["0,4.0", "abc,4.1", "8,4.2"])
    with pytest.raises(ParseError) as err:
        read_recording(path, "s", "HC")
    assert err.value.line == 3


def test_empty_and_zero_diameters_are_missing(tmp_path):
    path = tmp_path / "r.csv"
    _write_csv(path, ["0,4.0", "4,", "8,0", "12,4.2"])
    rec = read_recording(path, "s", "HC")
    np.testing.assert_array_equal(rec.missing, [False, True, True, False])


def test_short_recording_rejected():
    rec = Recording("s", "HC", np.linspace(0, 30_000, 100), np.full(100, 4.0))
    with pytest.raises(ValidationError):
        rec.validate()


def test_non_increasing_timestamps_rejected():
    t = np.arange(20_000) * 4.0
    t[50] = t[49]
    with pytest.raises(ValidationError):
        Recording("s", "HC", t, np.full(len(t), 4.0)).validate()


def test_duplicate_subject_rejected(tmp_path):
    ds = Dataset([_recording("s1", "HC"), _recording("s1", "PD")])
    with pytest.raises(ValidationError):
        save_dataset(ds, tmp_path / "ds")


def test_single_class_rejected():
    with pytest.raises(ValidationError):
        Dataset([_recording("a", "HC"), _recording("b", "HC")]).validate()


def test_missing_manifest(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(EmptyDataset):
        load_dataset(tmp_path / "empty")


def test_missing_path(tmp_path):
    with pytest.raises(IoError):
        load_dataset(tmp_path / "nowhere")


def test_unwritable_destination(tmp_path, pair):
    # a path below a regular file cannot be created, even as root
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoError):
        save_dataset(pair, blocker / "ds")


def test_unknown_label_in_manifest(tmp_path, pair):
    save_dataset(pair, tmp_path / "ds")
    manifest = tmp_path / "ds" / "manifest.csv"
    manifest.write_text(manifest.read_text().replace(",PD", ",XX"))
    with pytest.raises(ParseError):
        load_dataset(tmp_path / "ds")
