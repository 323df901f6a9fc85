"""Recording and dataset containers plus their CSV on-disk format.

A dataset directory holds one ``<subject_id>.csv`` per recording (header
``t_ms,diameter_mm``) and a ``manifest.csv`` (header ``file,subject_id,label``).
An empty or zero diameter marks a missing sample (blink or track loss); in
memory missing samples are NaN.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, IoError, ParseError, ValidationError

LABELS = ("HC", "PD")
SAMPLING_HZ = 240
MIN_DURATION_MS = 60_000.0

RECORDING_HEADER = "t_ms,diameter_mm"
MANIFEST_HEADER = "file,subject_id,label"
MANIFEST_NAME = "manifest.csv"


@dataclass(eq=False)
class Recording:
    subject_id: str
    label: str
    t_ms: np.ndarray
    diameter: np.ndarray  # mm, NaN where missing

    def __post_init__(self):
        self.t_ms = np.asarray(self.t_ms, dtype=np.float64)
        self.diameter = np.asarray(self.diameter, dtype=np.float64)

    @property
    def duration_ms(self):
        return float(self.t_ms[-1] - self.t_ms[0]) if len(self.t_ms) else 0.0

    @property
    def missing(self):
        return np.isnan(self.diameter)

    def validate(self):
        if self.label not in LABELS:
            raise ValidationError(f"{self.subject_id}: label must be one of {LABELS}, got {self.label!r}")
        if not _valid_subject_id(self.subject_id):
            raise ValidationError(f"invalid subject id {self.subject_id!r}")
        if self.t_ms.shape != self.diameter.shape or self.t_ms.ndim != 1:
            raise ValidationError(f"{self.subject_id}: timestamps and diameters differ in length")
        if len(self.t_ms) < 2:
            raise ValidationError(f"{self.subject_id}: fewer than two samples")
        if not np.all(np.isfinite(self.t_ms)):
            raise ValidationError(f"{self.subject_id}: non-finite timestamp")
        steps = np.diff(self.t_ms)
        if np.any(steps <= 0):
            i = int(np.argmax(steps <= 0)) + 1
            raise ValidationError(f"{self.subject_id}: timestamps not strictly increasing at sample {i}")
        present = self.diameter[~self.missing]
        if np.any(present <= 0) or np.any(~np.isfinite(present)):
            raise ValidationError(f"{self.subject_id}: non-positive or infinite diameter")
        if self.duration_ms < MIN_DURATION_MS:
            raise ValidationError(
                f"{self.subject_id}: recording lasts {self.duration_ms:.0f} ms, "
                f"at least {MIN_DURATION_MS:.0f} ms are needed"
            )
        return self

    def __eq__(self, other):
        if not isinstance(other, Recording):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.label == other.label
            and np.array_equal(self.t_ms, other.t_ms)
            and np.array_equal(self.diameter, other.diameter, equal_nan=True)
        )


@dataclass(eq=True)
class Dataset:
    recordings: list = field(default_factory=list)
    sampling_hz_nominal: int = SAMPLING_HZ

    def validate(self):
        if not self.recordings:
            raise EmptyDataset("dataset has no recordings")
        ids = [r.subject_id for r in self.recordings]
        dup = sorted({s for s in ids if ids.count(s) > 1})
        if dup:
            raise ValidationError(f"duplicated subject ids: {', '.join(dup)}")
        missing = set(LABELS) - {r.label for r in self.recordings}
        if missing:
            raise ValidationError(f"dataset lacks class(es): {', '.join(sorted(missing))}")
        for rec in self.recordings:
            rec.validate()
        return self

    def labels(self):
        """Mapping subject id -> label."""
        return {r.subject_id: r.label for r in self.recordings}

    def by_subject(self, subject_id):
        for rec in self.recordings:
            if rec.subject_id == subject_id:
                return rec
        raise KeyError(subject_id)


def _valid_subject_id(s):
    return bool(s) and not any(c in s for c in ",/\\\n\r") and s not in (".", "..")


def read_recording(path, subject_id, label):
    """Parse one recording CSV. Raises ParseError with the offending line."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read file: {exc}", path=str(path)) from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].rstrip("\r") != RECORDING_HEADER:
        raise ParseError(f"expected header {RECORDING_HEADER!r}", path=str(path), line=1)
    n = len(lines) - 1
    t = np.empty(n)
    d = np.empty(n)
    for i, line in enumerate(lines[1:]):
        parts = line.rstrip("\r").split(",")
        try:
            if len(parts) != 2:
                raise ValueError("expected two fields")
            t[i] = float(parts[0])
            field_ = parts[1].strip()
            d[i] = float(field_) if field_ else np.nan
            if not np.isfinite(t[i]) or (field_ and not np.isfinite(d[i])):
                raise ValueError("non-finite value")
        except ValueError as exc:
            raise ParseError(f"malformed sample {line!r} ({exc})", path=str(path), line=i + 2) from None
    d[d == 0] = np.nan
    if np.any(d < 0):
        i = int(np.argmax(d < 0))
        raise ValidationError(f"{path}:{i + 2}: negative diameter")
    return Recording(subject_id, label, t, d)


def _read_manifest(path):
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read manifest: {exc}", path=str(path)) from exc
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ParseError(f"expected header {MANIFEST_HEADER!r}", path=str(path), line=1)
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise ParseError("expected file,subject_id,label", path=str(path), line=lineno)
        if parts[2] not in LABELS:
            raise ParseError(f"unknown label {parts[2]!r}", path=str(path), line=lineno)
        entries.append(tuple(parts))
    return entries


def load_dataset(path):
    """Load a dataset from a directory (containing ``manifest.csv``) or from a
    manifest file; recording paths are relative to the manifest."""
    path = Path(path)
    if not path.exists():
        raise IoError(f"no such file or directory: {path}")
    manifest = path / MANIFEST_NAME if path.is_dir() else path
    if not manifest.exists():
        raise EmptyDataset(f"no {MANIFEST_NAME} in {path}")
    entries = _read_manifest(manifest)
    if not entries:
        raise EmptyDataset(f"manifest {manifest} lists no recordings")
    recordings = [read_recording(manifest.parent / f, sid, label) for f, sid, label in entries]
    return Dataset(recordings).validate()


def _format_float(x):
    return repr(float(x))


def save_dataset(dataset, path):
    """Write ``dataset`` to directory ``path`` (created if needed).

    Floats are written with ``repr`` so that loading gives back identical bits.
    """
    dataset.validate()
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        rows = [MANIFEST_HEADER]
        for rec in dataset.recordings:
            name = f"{rec.subject_id}.csv"
            body = [RECORDING_HEADER]
            for t, d in zip(rec.t_ms.tolist(), rec.diameter.tolist()):
                body.append(f"{_format_float(t)},{'' if d != d else _format_float(d)}")
            _write_text(path / name, "\n".join(body) + "\n")
            rows.append(f"{name},{rec.subject_id},{rec.label}")
        _write_text(path / MANIFEST_NAME, "\n".join(rows) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write dataset to {path}: {exc}") from exc


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
