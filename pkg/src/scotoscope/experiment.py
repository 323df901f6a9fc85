"""Subject-wise k-fold cross-validation over window lengths and models.

A run directory holds::

    config.txt        the experiment configuration (key = value)
    folds.json        the subject-wise fold plan
    windows/<n>s/     the segmented windows of every subject, per length
    models/           one parameter file per (length, arch, norm, fold)
    metrics.jsonl     one JSON line per fold result, in a fixed order
    report.*          rendered tables

Training windows of each fold get noise masks transplanted from training
subjects of the other class; validation and test windows are left as
segmented. PP subject means come from each subject's own recording, and the
normative graphs of the baselines from training windows only.
"""

import csv
import io
import json
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import baseline, preprocess, synth
from .errors import ConfigError, IoError, ParseError, ValidationError
from .kvconfig import format_kv, read_kv, to_float, to_int
from .model import TrainConfig, build_model, evaluate, train
from .signal_io import LABELS, SAMPLING_HZ, load_dataset

BASELINES = ("B1", "B2")
MODEL_ARCHS = ("MLP", "CNN")
NORM_MODES = ("PP", "BN")

# Reported accuracies (%) of the original study, shown for orientation only.
# They come from clinical recordings and are not reproduced here.
REFERENCE_ACCURACY = {
    ("B1", None, "PP"): (63.89, None),
    ("B2", None, "PP"): (61.11, None),
    ("MLP", 10, "PP"): (50.20, 1.66),
    ("MLP", 10, "BN"): (56.00, 0.03),
    ("CNN", 10, "PP"): (54.20, 1.56),
    ("CNN", 10, "BN"): (77.19, 3.33),
    ("MLP", 15, "PP"): (51.15, 0.9),
    ("MLP", 15, "BN"): (57.23, 0.02),
    ("CNN", 15, "PP"): (74.65, 1.08),
    ("CNN", 15, "BN"): (81.26, 1.79),
    ("MLP", 30, "PP"): (50.87, 0.81),
    ("MLP", 30, "BN"): (54.11, 0.09),
    ("CNN", 30, "PP"): (56.67, 1.77),
    ("CNN", 30, "BN"): (79.27, 3.99),
    ("MLP", 60, "PP"): (50.95, 1.15),
    ("MLP", 60, "BN"): (55.23, 0.55),
    ("CNN", 60, "PP"): (59.99, 3.99),
    ("CNN", 60, "BN"): (72.20, 3.37),
}


@dataclass(frozen=True)
class ExperimentConfig:
    data_source: str = "synthetic"  # "synthetic" or "directory"
    data_dir: str = ""
    synth_config: synth.SynthConfig = None
    window_lengths: tuple = (15,)
    configurations: tuple = (("MLP", "BN"), ("CNN", "BN"))
    baselines: tuple = BASELINES
    fold_seed: int = 0
    shuffle_seed: int = 0
    train_seed: int = 0
    noise_transplant_probability: float = 0.5
    k: int = 5
    dropout_rate: float = 0.2
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        if self.data_source not in ("synthetic", "directory"):
            raise ConfigError(f"data_source must be 'synthetic' or 'directory', got {self.data_source!r}")
        if self.data_source == "directory" and not self.data_dir:
            raise ConfigError("data_dir is required when data_source is 'directory'")
        if not self.window_lengths:
            raise ConfigError("window_lengths must not be empty")
        for n in self.window_lengths:
            if n not in preprocess.MISSING_THRESHOLDS:
                raise ConfigError(f"window length {n} s is not one of {sorted(preprocess.MISSING_THRESHOLDS)}")
        if not self.configurations and not self.baselines:
            raise ConfigError("configurations must not be empty")
        for arch, norm in self.configurations:
            if arch not in MODEL_ARCHS or norm not in NORM_MODES:
                raise ConfigError(f"unknown configuration {arch}:{norm}")
        for b in self.baselines:
            if b not in BASELINES:
                raise ConfigError(f"unknown baseline {b!r}")
        if not 0.0 <= self.noise_transplant_probability <= 1.0:
            raise ConfigError("noise_transplant_probability must lie in [0, 1]")
        if self.k < 2:
            raise ConfigError("k must be at least 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        t = self.train
        if min(t.max_epochs, t.batch_size, t.early_stop_patience) < 1 or not t.lr > 0:
            raise ConfigError("training settings must be positive")
        if t.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        return self

    def synthetic(self):
        return self.synth_config if self.synth_config is not None else synth.default_separable_config(0)

    def to_mapping(self):
        t = self.train
        out = {
            "data_source": self.data_source,
            "data_dir": self.data_dir,
            "window_lengths": ", ".join(str(n) for n in self.window_lengths),
            "configurations": ", ".join(f"{a}:{n}" for a, n in self.configurations),
            "baselines": ", ".join(self.baselines),
            "fold_seed": str(self.fold_seed),
            "shuffle_seed": str(self.shuffle_seed),
            "train_seed": str(self.train_seed),
            "noise_transplant_probability": repr(self.noise_transplant_probability),
            "k": str(self.k),
            "dropout_rate": repr(self.dropout_rate),
            "max_epochs": str(t.max_epochs),
            "batch_size": str(t.batch_size),
            "lr": repr(t.lr),
            "early_stop_patience": str(t.early_stop_patience),
        }
        if self.data_source == "synthetic":
            out.update({f"synth.{k}": v for k, v in self.synthetic().to_mapping().items()})
        return out

    def to_text(self):
        return format_kv(self.to_mapping())


def _split_list(value):
    return [p.strip() for p in value.split(",") if p.strip()]


def config_from_mapping(mapping, base=None):
    """Build an :class:`ExperimentConfig` from ``key -> str`` pairs.

    ``synth.<key>`` entries configure the synthetic data (see
    :func:`scotoscope.synth.config_from_mapping`); ``synth.preset`` picks the
    starting point, ``separable`` (default) or ``high_variance``.
    """
    cfg = base or ExperimentConfig()
    mapping = dict(mapping)
    synth_keys = {k[len("synth."):]: mapping.pop(k) for k in list(mapping) if k.startswith("synth.")}
    top = {}
    train_kw = {}
    for key, value in mapping.items():
        if key in ("data_source", "data_dir"):
            top[key] = value
        elif key == "window_lengths":
            top[key] = tuple(to_int(key, v) for v in _split_list(value))
        elif key == "configurations":
            pairs = []
            for item in _split_list(value):
                arch, sep, norm = item.partition(":")
                if not sep:
                    raise ConfigError(f"configurations: expected ARCH:NORM, got {item!r}")
                pairs.append((_canonical_arch(arch), norm.strip().upper()))
            top[key] = tuple(pairs)
        elif key == "baselines":
            top[key] = tuple(v.upper() for v in _split_list(value))
        elif key in ("fold_seed", "shuffle_seed", "train_seed", "k"):
            top[key] = to_int(key, value)
        elif key in ("noise_transplant_probability", "dropout_rate"):
            top[key] = to_float(key, value)
        elif key in ("max_epochs", "batch_size", "early_stop_patience"):
            train_kw[key] = to_int(key, value)
        elif key == "lr":
            train_kw[key] = to_float(key, value)
        else:
            raise ConfigError(f"unknown experiment config key {key!r}")
    if synth_keys or cfg.synth_config is None:
        preset = synth_keys.pop("preset", None)
        if preset is None and cfg.synth_config is not None:
            start = cfg.synth_config
        else:
            seed = to_int("synth.seed", synth_keys.get("seed", "0"))
            n = to_int("synth.n_subjects_per_class", synth_keys.get("n_subjects_per_class", "20"))
            presets = {"separable": synth.default_separable_config, "high_variance": synth.high_variance_config}
            if (preset or "separable") not in presets:
                raise ConfigError(f"synth.preset must be 'separable' or 'high_variance', got {preset!r}")
            start = presets[preset or "separable"](seed, n)
        top["synth_config"] = synth.config_from_mapping(synth_keys, base=start)
    return replace(cfg, train=replace(cfg.train, **train_kw), **top).validate()


def load_config(path):
    return config_from_mapping(read_kv(path))


def _canonical_arch(arch):
    arch = arch.strip().upper()
    return "CNN" if arch in ("CNN1D", "1D-CNN") else arch


# ----------------------------------------------------------------------------
# Results
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    arch: str
    window_sec: int
    norm_mode: str
    mean_accuracy: float
    std_accuracy: float
    per_fold_accuracies: tuple

    @classmethod
    def from_folds(cls, arch, window_sec, norm_mode, accuracies):
        acc = np.asarray(accuracies, dtype=np.float64)
        # population standard deviation over the folds
        return cls(arch, int(window_sec), norm_mode, float(acc.mean()), float(acc.std()), tuple(float(a) for a in acc))

    def key(self):
        return (self.arch, self.window_sec, self.norm_mode)


@dataclass
class ResultsTable:
    rows: list

    def row(self, arch, window_sec, norm_mode):
        for r in self.rows:
            if r.key() == (arch, window_sec, norm_mode):
                return r
        raise KeyError((arch, window_sec, norm_mode))

    def best_flags(self):
        """Per window length, True for the row(s) with the highest mean."""
        best = {}
        for r in self.rows:
            best[r.window_sec] = max(best.get(r.window_sec, -1.0), r.mean_accuracy)
        return [r.mean_accuracy == best[r.window_sec] for r in self.rows]

    def to_dict(self):
        return {
            "rows": [
                {
                    "arch": r.arch,
                    "window_sec": r.window_sec,
                    "norm_mode": r.norm_mode,
                    "mean_accuracy": r.mean_accuracy,
                    "std_accuracy": r.std_accuracy,
                    "per_fold_accuracies": list(r.per_fold_accuracies),
                    "best": flag,
                }
                for r, flag in zip(self.rows, self.best_flags())
            ]
        }

    @classmethod
    def from_dict(cls, data):
        try:
            rows = [
                ResultRow(
                    d["arch"], int(d["window_sec"]), d["norm_mode"], float(d["mean_accuracy"]),
                    float(d["std_accuracy"]), tuple(float(a) for a in d["per_fold_accuracies"]),
                )
                for d in data["rows"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"invalid results table: {exc}") from exc
        return cls(rows)


def table_from_records(records):
    """Aggregate fold records (dicts as in ``metrics.jsonl``) into a table.

    Rows keep the order in which their first fold appears.
    """
    groups = {}
    for rec in records:
        key = (rec["arch"], int(rec["window_sec"]), rec["norm"])
        groups.setdefault(key, {})[int(rec["fold"])] = float(rec["test_accuracy"])
    rows = []
    for (arch, n, norm), by_fold in groups.items():
        rows.append(ResultRow.from_folds(arch, n, norm, [by_fold[i] for i in sorted(by_fold)]))
    return ResultsTable(rows)


def read_metrics(path):
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.jsonl"
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read metrics: {exc}") from exc
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}", path=str(path), line=lineno) from None
    if not records:
        raise ValidationError(f"{path} holds no results")
    return records


def load_table(run_dir):
    return table_from_records(read_metrics(run_dir))


# ----------------------------------------------------------------------------
# Rendering
# ----------------------------------------------------------------------------


def format_accuracy(mean, std):
    """``0.8126, 0.0179`` -> ``"81.26 (±1.79)"``."""
    return f"{100 * mean:.2f} (±{100 * std:.2f})"


def _display_arch(arch):
    return "1D-CNN" if arch == "CNN" else arch


def _reference(row):
    ref = REFERENCE_ACCURACY.get(row.key()) or REFERENCE_ACCURACY.get((row.arch, None, row.norm_mode))
    if ref is None:
        return ""
    mean, std = ref
    return f"{mean:.2f}" if std is None else f"{mean:.2f} (±{std:.2f})"


def render_report(table, fmt="text"):
    if not table.rows:
        raise ValidationError("cannot render an empty table")
    if fmt == "json":
        return json.dumps(table.to_dict(), indent=1, sort_keys=True) + "\n"
    if fmt == "csv":
        return _render_csv(table)
    if fmt == "text":
        return _render_text(table)
    raise ConfigError(f"unknown report format {fmt!r}")


def _render_csv(table):
    n_folds = max(len(r.per_fold_accuracies) for r in table.rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["arch", "window_sec", "norm_mode", "mean_accuracy", "std_accuracy"]
        + [f"fold_{i + 1}" for i in range(n_folds)]
        + ["best"]
    )
    for r, flag in zip(table.rows, table.best_flags()):
        folds = [repr(a) for a in r.per_fold_accuracies] + [""] * (n_folds - len(r.per_fold_accuracies))
        writer.writerow([r.arch, r.window_sec, r.norm_mode, repr(r.mean_accuracy), repr(r.std_accuracy)] + folds + [int(flag)])
    return buf.getvalue()


def _render_text(table):
    header = ("Model", "Seq. len. (s)", "Norm.", "Accuracy (%)", "", "Reference (%)")
    body = []
    flags = table.best_flags()
    for r, flag in zip(table.rows, flags):
        body.append(
            (_display_arch(r.arch), str(r.window_sec), r.norm_mode,
             format_accuracy(r.mean_accuracy, r.std_accuracy), "*" if flag else "", _reference(r))
        )
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]

    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    out = [line(header), "-" * len(line(header))]
    previous = None
    for r, cells in zip(table.rows, body):
        if previous is not None and r.window_sec != previous:
            out.append("")
        out.append(line(cells))
        previous = r.window_sec
    out += [
        "",
        f"Mean test accuracy over {max(len(r.per_fold_accuracies) for r in table.rows)} folds, "
        "population standard deviation in brackets; * marks the best row per sequence length.",
        "Reference values are the published clinical-data scores. They are not reproduced by this run.",
    ]
    return "\n".join(out) + "\n"


# ----------------------------------------------------------------------------
# Running
# ----------------------------------------------------------------------------

# Window data shared with worker processes (set before forking).
_SHARED = {}


def _load_data(config):
    if config.data_source == "directory":
        return load_dataset(config.data_dir)
    return synth.generate_dataset(config.synthetic())


def prepare_windows(dataset, n_sec):
    """Windows of every subject and the per-subject means."""
    windows, means = [], {}
    for rec in dataset.recordings:
        series = preprocess.prepare_series(rec)
        means[rec.subject_id] = preprocess.subject_mean(series)
        windows.extend(preprocess.segment(series, n_sec))
    return windows, means


def donor_bank(windows, subjects):
    """Per class, one donor series per subject: its windows laid end to end.

    Only the gap masks of the bank are used for transplantation.
    """
    keep = set(subjects)
    by_subject = {}
    for w in windows:
        if w.subject_id in keep:
            by_subject.setdefault(w.subject_id, []).append(w)
    bank = {label: [] for label in LABELS}
    for sid in sorted(by_subject):
        ws = sorted(by_subject[sid], key=lambda w: w.source_offset)
        series = preprocess.UniformSeries(
            np.concatenate([w.values for w in ws]), np.concatenate([w.gap_mask for w in ws]), sid, ws[0].label
        )
        bank[series.label].append(series)
    return bank


def fold_windows(windows, fold, fold_index, probability=0.5, shuffle_seed=0):
    """Train/val/test windows of one fold.

    Training windows get noise masks transplanted from training subjects of
    the other class and are shuffled; validation and test windows keep the
    segmentation order.
    """
    sets = []
    for subjects in (fold.train, fold.val, fold.test):
        keep = set(subjects)
        sets.append([w for w in windows if w.subject_id in keep])
    train_w, val_w, test_w = sets
    if not train_w:
        raise ValidationError(f"fold {fold_index} has no training windows")
    n_sec = len(train_w[0].values) // SAMPLING_HZ
    if probability > 0:
        train_w = preprocess.transplant_noise_masks(
            train_w, donor_bank(train_w, fold.train), probability, seed=[shuffle_seed, n_sec, fold_index]
        )
    train_w = preprocess.shuffle_windows(train_w, [shuffle_seed, n_sec, fold_index])
    return train_w, val_w, test_w


def _run_task(task):
    config, n_sec, fold_index, name, norm, model_dir = task
    fold = _SHARED["plan"].folds[fold_index]
    means = _SHARED["means"][n_sec]
    train_w, val_w, test_w = fold_windows(
        _SHARED["windows"][n_sec], fold, fold_index, config.noise_transplant_probability, config.shuffle_seed
    )
    record = {
        "arch": name,
        "window_sec": n_sec,
        "norm": norm,
        "fold": fold_index,
        "n_train": len(train_w),
        "n_val": len(val_w),
        "n_test": len(test_w),
    }
    if name in BASELINES:
        graphs = baseline.build_normative_graphs(preprocess.normalize_pp(train_w, means))
        record["test_accuracy"] = baseline.evaluate_baseline(name, preprocess.normalize_pp(test_w, means), graphs)
        return record
    if norm == "PP":
        train_w, val_w, test_w = (preprocess.normalize_pp(s, means) for s in (train_w, val_w, test_w))
    spec = build_model(name, n_sec * SAMPLING_HZ, norm, config.dropout_rate)
    model = train(spec, train_w, val_w, replace(config.train, seed=config.train_seed))
    record.update(
        {
            "test_accuracy": evaluate(model, test_w),
            "val_accuracy": max(h["val_acc"] for h in model.history),
            "best_epoch": model.best_epoch,
            "epochs": len(model.history),
            "final_loss": model.history[-1]["loss"],
        }
    )
    if model_dir is not None:
        model.save(Path(model_dir) / model_filename(name, norm, n_sec, fold_index))
    return record


def model_filename(arch, norm, n_sec, fold_index):
    return f"{arch.lower()}-{norm.lower()}-{n_sec}s-fold{fold_index}.scto"


def run_experiment(config, out_dir=None, jobs=1, progress=None):
    """Run the cross-validation and return a :class:`ResultsTable`.

    With ``out_dir`` the run directory is written (see module docstring).
    ``jobs > 1`` trains folds and configurations in worker processes; the
    results do not depend on ``jobs``. ``progress`` is called with every fold
    record in the order of ``metrics.jsonl``.
    """
    config.validate()
    dataset = _load_data(config)
    plan = preprocess.make_folds(dataset, config.fold_seed, config.k)
    out = Path(out_dir) if out_dir is not None else None
    model_dir = None
    if out is not None:
        try:
            (out / "models").mkdir(parents=True, exist_ok=True)
            (out / "config.txt").write_text(config.to_text(), encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot create run directory {out}: {exc}") from exc
        plan.save(out / "folds.json")
        model_dir = str(out / "models")

    _SHARED.clear()
    _SHARED.update(plan=plan, windows={}, means={})
    for n_sec in config.window_lengths:
        windows, means = prepare_windows(dataset, n_sec)
        _SHARED["windows"][n_sec] = windows
        _SHARED["means"][n_sec] = means
        if out is not None:
            preprocess.save_windows(out / "windows" / f"{n_sec}s", windows, means, {"window_sec": n_sec})

    tasks = []
    for n_sec in config.window_lengths:
        for name in config.baselines:
            tasks += [(config, n_sec, i, name, "PP", model_dir) for i in range(config.k)]
        for arch, norm in config.configurations:
            tasks += [(config, n_sec, i, arch, norm, model_dir) for i in range(config.k)]

    records = []
    try:
        if jobs > 1 and len(tasks) > 1:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
                for rec in pool.map(_run_task, tasks):
                    records.append(rec)
                    if progress is not None:
                        progress(rec)
        else:
            for task in tasks:
                rec = _run_task(task)
                records.append(rec)
                if progress is not None:
                    progress(rec)
    finally:
        _SHARED.clear()

    table = table_from_records(records)
    if out is not None:
        try:
            with open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n") as fh:
                for rec in records:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            for fmt in ("text", "json", "csv"):
                suffix = "txt" if fmt == "text" else fmt
                (out / f"report.{suffix}").write_text(render_report(table, fmt), encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot write results to {out}: {exc}") from exc
    return table


def leakage_audit(run_dir):
    """Count windows whose subject sits in more than one set of a fold.

    Checks the fold plan of ``run_dir`` against the subject tags of the saved
    windows; returns a list of ``(fold, subject)`` offences (empty when clean).
    """
    run_dir = Path(run_dir)
    plan = preprocess.FoldPlan.load(run_dir / "folds.json")
    offences = []
    for sub in sorted((run_dir / "windows").iterdir()):
        windows, _ = preprocess.load_windows(sub)
        tags = {w.subject_id for w in windows}
        for i, fold in enumerate(plan.folds):
            sets = [set(fold.train) & tags, set(fold.val) & tags, set(fold.test) & tags]
            shared = (sets[0] & sets[1]) | (sets[0] & sets[2]) | (sets[1] & sets[2])
            offences += [(i, s) for s in sorted(shared)]
    return offences
