"""``scotoscope`` command line.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 internal
error. ``--jobs``, ``--json`` and ``--quiet`` may be given before or after the
subcommand.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import baseline, experiment, preprocess, synth
from .errors import IoError, ScotoscopeError
from .kvconfig import read_kv
from .model import TrainConfig, build_model, evaluate, train
from .signal_io import LABELS, SAMPLING_HZ, load_dataset, save_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _u64(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an unsigned integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def _window_sec(text):
    value = _positive_int(text)
    if value not in preprocess.MISSING_THRESHOLDS:
        raise argparse.ArgumentTypeError(f"window length must be one of {sorted(preprocess.MISSING_THRESHOLDS)}")
    return value


def _add_global_flags(parser, suppress):
    # on subparsers the defaults are suppressed so a flag given before the
    # subcommand is not overwritten by the subparser's default
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--jobs", type=_positive_int, default=default(1), help="parallel workers (default 1)")
    parser.add_argument("--json", action="store_true", default=default(False), help="print JSON to stdout")
    parser.add_argument("--quiet", action="store_true", default=default(False), help="suppress progress output")


def build_parser():
    parser = _Parser(prog="scotoscope", description="Pupil-size time series classification pipeline.")
    _add_global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--config", help="key = value synthetic config (default: separable preset)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=_u64, default=0, help="generator seed (default 0)")

    p = sub.add_parser("preprocess", help="resample, fill gaps, segment and plan folds")
    p.add_argument("--in", dest="input", required=True, help="dataset directory or manifest")
    p.add_argument("--out", required=True, help="output windows directory")
    p.add_argument("--window-sec", type=_window_sec, required=True, help="window length: 10, 15, 30 or 60")
    p.add_argument("--seed", type=_u64, default=0, help="fold seed (default 0)")
    p.add_argument("--k", type=_positive_int, default=5, help="number of folds (default 5)")

    p = sub.add_parser("baseline", help="evaluate a normative-graph baseline over the folds")
    p.add_argument("--method", type=str.lower, choices=("b1", "b2"), required=True)
    p.add_argument("--windows", required=True, help="preprocess output directory")
    p.add_argument("--folds", help="fold plan (default: <windows>/folds.json)")
    p.add_argument("--fold", type=int, help="evaluate one fold only")
    p.add_argument("--transplant-probability", type=float, default=0.5)
    p.add_argument("--shuffle-seed", type=_u64, default=0)

    p = sub.add_parser("train", help="train one model on one fold")
    p.add_argument("--arch", type=str.lower, choices=("mlp", "cnn"), required=True)
    p.add_argument("--norm", type=str.lower, choices=("pp", "bn"), default="bn")
    p.add_argument("--window-sec", type=_window_sec, help="window length (required for cnn)")
    p.add_argument("--windows", required=True, help="preprocess output directory")
    p.add_argument("--folds", help="fold plan (default: <windows>/folds.json)")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--seed", type=_u64, default=0, help="training seed (default 0)")
    p.add_argument("--shuffle-seed", type=_u64, default=0)
    p.add_argument("--transplant-probability", type=float, default=0.5)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--max-epochs", type=_positive_int, default=TrainConfig.max_epochs)
    p.add_argument("--batch-size", type=_positive_int, default=TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--patience", type=_positive_int, default=TrainConfig.early_stop_patience)
    p.add_argument("--out", required=True, help="model file to write")

    p = sub.add_parser("crossval", help="run the full cross-validation")
    p.add_argument("--config", help="key = value experiment config (default settings when omitted)")
    p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("report", help="render the results table of a run")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--format", choices=("text", "json", "csv"), default="text")

    for action in sub.choices.values():
        _add_global_flags(action, suppress=True)
    return parser


def _emit(args, payload, text):
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    elif not args.quiet and text:
        print(text)


def _log(args, message):
    if not args.quiet:
        print(message, file=sys.stderr)


def _cmd_generate(args):
    if args.config:
        cfg = synth.config_from_mapping(read_kv(args.config), base=synth.default_separable_config(args.seed))
        cfg = replace(cfg, seed=args.seed).validate()
    else:
        cfg = synth.default_separable_config(args.seed)
    dataset = synth.generate_dataset(cfg)
    save_dataset(dataset, args.out)
    counts = {label: sum(r.label == label for r in dataset.recordings) for label in LABELS}
    _emit(args, {"out": str(args.out), "recordings": len(dataset.recordings), "per_class": counts},
          f"wrote {len(dataset.recordings)} recordings to {args.out}")
    return EXIT_OK


def _cmd_preprocess(args):
    dataset = load_dataset(args.input)
    windows, means = experiment.prepare_windows(dataset, args.window_sec)
    plan = preprocess.make_folds(dataset, args.seed, args.k)
    out = Path(args.out)
    preprocess.save_windows(out, windows, means, {"window_sec": args.window_sec})
    plan.save(out / "folds.json")
    _emit(args, {"out": str(out), "windows": len(windows), "subjects": len(means), "k": plan.k},
          f"wrote {len(windows)} windows of {len(means)} subjects and a {plan.k}-fold plan to {out}")
    return EXIT_OK


def _load_windows_and_plan(args):
    windows, index = preprocess.load_windows(args.windows)
    plan = preprocess.FoldPlan.load(args.folds or Path(args.windows) / "folds.json")
    return windows, index, plan


def _fold_indices(args, plan):
    if args.fold is None:
        return list(range(plan.k))
    if not 0 <= args.fold < plan.k:
        raise UsageError(f"--fold must lie in [0, {plan.k - 1}]")
    return [args.fold]


def _cmd_baseline(args):
    windows, index, plan = _load_windows_and_plan(args)
    means = index["subject_means"]
    method = args.method.upper()
    rows = []
    for i in _fold_indices(args, plan):
        train_w, _, test_w = experiment.fold_windows(
            windows, plan.folds[i], i, args.transplant_probability, args.shuffle_seed
        )
        graphs = baseline.build_normative_graphs(preprocess.normalize_pp(train_w, means))
        acc = baseline.evaluate_baseline(method, preprocess.normalize_pp(test_w, means), graphs)
        rows.append({"fold": i, "test_accuracy": acc})
    mean = sum(r["test_accuracy"] for r in rows) / len(rows)
    text = "\n".join(f"fold {r['fold']}: {100 * r['test_accuracy']:.2f}" for r in rows)
    _emit(args, {"method": method, "folds": rows, "mean_accuracy": mean},
          f"{text}\n{method} mean accuracy: {100 * mean:.2f}")
    return EXIT_OK


def _cmd_train(args):
    if args.arch == "cnn" and args.window_sec is None:
        raise UsageError("train --arch cnn requires --window-sec")
    windows, index, plan = _load_windows_and_plan(args)
    n_sec = args.window_sec or int(index["length"]) // SAMPLING_HZ
    (i,) = _fold_indices(args, plan)
    train_w, val_w, test_w = experiment.fold_windows(
        windows, plan.folds[i], i, args.transplant_probability, args.shuffle_seed
    )
    norm = args.norm.upper()
    if norm == "PP":
        means = index["subject_means"]
        train_w, val_w, test_w = (preprocess.normalize_pp(s, means) for s in (train_w, val_w, test_w))
    spec = build_model(args.arch.upper(), n_sec * SAMPLING_HZ, norm, args.dropout)
    config = TrainConfig(args.max_epochs, args.batch_size, args.lr, args.patience, args.seed)

    def on_epoch(record):
        if not args.quiet:
            print(json.dumps(record, sort_keys=True), flush=True)

    model = train(spec, train_w, val_w, config, on_epoch=on_epoch)
    model.save(args.out)
    acc = evaluate(model, test_w) if test_w else None
    summary = {"out": str(args.out), "best_epoch": model.best_epoch, "test_accuracy": acc, "fold": i}
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        _log(args, f"best epoch {model.best_epoch}; test accuracy {acc if acc is None else round(acc, 4)}")
    return EXIT_OK


def _cmd_crossval(args):
    config = experiment.load_config(args.config) if args.config else experiment.ExperimentConfig().validate()

    def progress(rec):
        _log(args, f"{rec['arch']}:{rec['norm']} {rec['window_sec']}s fold {rec['fold']}: "
                   f"{100 * rec['test_accuracy']:.2f}")

    table = experiment.run_experiment(config, out_dir=args.out, jobs=args.jobs, progress=progress)
    if args.json:
        print(json.dumps(table.to_dict(), sort_keys=True))
    elif not args.quiet:
        print(experiment.render_report(table, "text"), end="")
    return EXIT_OK


def _cmd_report(args):
    run = Path(args.run)
    if not run.is_dir():
        raise IoError(f"no such run directory: {run}")
    table = experiment.load_table(run)
    fmt = "json" if args.json else args.format
    doc = experiment.render_report(table, fmt)
    suffix = "txt" if fmt == "text" else fmt
    try:
        (run / f"report.{suffix}").write_text(doc, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write report: {exc}") from exc
    if not args.quiet or args.json:
        print(doc, end="")
    return EXIT_OK


COMMANDS = {
    "generate": _cmd_generate,
    "preprocess": _cmd_preprocess,
    "baseline": _cmd_baseline,
    "train": _cmd_train,
    "crossval": _cmd_crossval,
    "report": _cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ScotoscopeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
