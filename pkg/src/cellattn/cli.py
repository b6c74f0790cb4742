"""Command-line entry point: ``cellattn {generate,train,saliency,evaluate,experiment}``.

Exit codes: 0 success, 2 validation error (bad flags, config, input files),
3 runtime or numeric error (divergence, non-finite gradients, failed writes).
"""

from __future__ import annotations

import argparse
import csv
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import config as cfg
from . import datagen, metrics, saliency
from .cells import CheckpointError, ModelSpec, load_checkpoint, save_checkpoint
from .experiments import ExperimentError, run
from .training import train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValueError):
    pass


def _writable_dir(path: Path) -> None:
    target = path if path.is_dir() else path.parent if str(path.parent) else Path(".")
    probe = target
    while not probe.exists():
        probe = probe.parent
    try:
        if not probe.is_dir():
            raise OSError(f"{probe} is not a directory")
        with tempfile.TemporaryFile(dir=probe):
            pass
    except OSError as exc:
        raise UsageError(f"cannot write under {path}: {exc}") from exc


def _input_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file {p} not found")
    return p


# -- subcommands ---------------------------------------------------------------

def cmd_generate(args) -> int:
    kind = args.kind
    if args.start is not None:
        if kind != "moving":
            raise UsageError("--start only applies to --kind moving")
        kind = f"moving({args.start})"
    elif kind == "moving":
        raise UsageError("--kind moving needs --start")
    datagen.parse_kind(kind)
    datagen.box_layout(kind, args.t, args.n)
    if args.n_samples < 2:
        raise UsageError("--n-samples must be at least 2")
    out = Path(args.out)
    _writable_dir(out)
    ds = datagen.generate_box_dataset(kind, args.n_samples, args.seed, args.split, t_len=args.t,
                                      n_features=args.n, amplitude=args.amplitude)
    out.parent.mkdir(parents=True, exist_ok=True)
    print(datagen.save_dataset(ds, out))
    return EXIT_OK


def cmd_train(args) -> int:
    parser = cfg.read(args.config) if args.config else None
    overrides = dict(optimizer=args.optimizer, learning_rate=args.lr, batch_size=args.batch_size,
                     max_epochs=args.max_epochs, patience=args.patience, seed=args.seed, precision=args.precision)
    config = cfg.train_config(parser, overrides)
    dims = cfg.model_dims(parser, dict(hidden=args.hidden, d_a=args.d_a, hops=args.hops))
    tr = datagen.load_dataset(_input_file(args.data), "train")
    te = datagen.load_dataset(_input_file(args.test_data), "test")
    if (tr.T, tr.N, tr.n_classes) != (te.T, te.N, te.n_classes):
        raise UsageError("train and test datasets have different shapes or class counts")
    spec = ModelSpec.from_name(args.model, tr.N, tr.n_classes, t_max=tr.T, **dims)
    out = Path(args.out)
    log = Path(args.log) if args.log else out.with_suffix(".log.csv")
    _writable_dir(out)
    _writable_dir(log)

    def progress(epoch, loss, acc):
        if not args.quiet:
            print(f"epoch {epoch:3d}  loss {loss:.6f}  test acc {acc:.4f}", file=sys.stderr)

    result = train(spec, tr, te, config, progress=progress)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out)
    result.write_log(log)
    print(f"{spec.name}: {result.epochs_run} epochs, best test accuracy {result.best_test_accuracy:.4f} "
          f"(epoch {result.best_epoch})")
    return EXIT_OK


def _select(ds, args) -> np.ndarray:
    if args.indices:
        idx = np.array([int(i) for i in args.indices.split(",")])
        if (idx < 0).any() or (idx >= len(ds)).any():
            raise UsageError(f"sample indices must lie in [0, {len(ds)})")
        return idx
    return np.arange(min(args.samples, len(ds)))


def cmd_saliency(args) -> int:
    model = load_checkpoint(_input_file(args.checkpoint))
    ds = datagen.load_dataset(_input_file(args.data), "test")
    if ds.N != model.spec.n_features:
        raise UsageError(f"checkpoint expects {model.spec.n_features} features, dataset has {ds.N}")
    idx = _select(ds, args)
    out = Path(args.out_dir)
    _writable_dir(out)
    pred = model.predict(ds.X[idx]).argmax(axis=1)
    targets = pred if args.target == "predicted" else ds.y[idx]
    maps = saliency.saliency_maps(model, ds.X[idx], targets)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("sample", "label", "predicted", "target", "correct", "scale", "csv", "pgm"))
        for j, i in enumerate(idx):
            saliency.write_csv(maps[j], out / f"{i}.csv")
            scale = saliency.write_pgm(maps[j], out / f"{i}.pgm")
            w.writerow((i, ds.y[i], pred[j], targets[j], int(pred[j] == ds.y[i]), f"{scale:.9g}", f"{i}.csv", f"{i}.pgm"))
    print(f"wrote {len(idx)} saliency maps to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_checkpoint(_input_file(args.checkpoint))
    ds = datagen.load_dataset(_input_file(args.data), "test")
    if ds.N != model.spec.n_features:
        raise UsageError(f"checkpoint expects {model.spec.n_features} features, dataset has {ds.N}")
    out = Path(args.out) if args.out else None
    if out is not None:
        _writable_dir(out)
    pred = model.predict(ds.X).argmax(axis=1)
    ok = np.flatnonzero(pred == ds.y)
    row = dict(dataset=args.name or Path(args.data).stem, model=model.spec.name, seed=args.seed,
               wjac=float("nan"), euc=float("nan"), acc=float(np.mean(pred == ds.y)), n_correct=len(ok))
    if ds.masks is not None and len(ok):
        maps = saliency.saliency_maps(model, ds.X[ok], pred[ok])
        row["wjac"], row["euc"] = metrics.evaluate_maps(ds.X[ok], ds.masks[ok], maps)
    columns = metrics.REPORT_COLUMNS + ("n_correct",)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        metrics.write_report([row], out, columns)
    print(",".join(columns))
    print(",".join(metrics._fmt(row[c]) for c in columns))
    return EXIT_OK


def cmd_experiment(args) -> int:
    overrides = {"workers": args.workers}
    if args.output_dir:
        overrides["output_dir"] = Path(args.output_dir)
    spec = cfg.experiment_spec(_input_file(args.spec), overrides)
    _writable_dir(spec.output_dir)
    report = run(spec)
    print(f"{spec.suite}: {len(report.rows)} cells -> {spec.output_dir / 'report.csv'}")
    for note in report.flagged:
        print(f"flagged: {note}", file=sys.stderr)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cellattn", description="Input-cell attention LSTMs and saliency experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic box dataset (ICTS) and print its sha256")
    g.add_argument("--kind", required=True, choices=datagen.KINDS)
    g.add_argument("--start", type=int, help="box start for --kind moving")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", choices=tuple(datagen.SPLITS), default="train")
    g.add_argument("--n-samples", type=int, default=1000)
    g.add_argument("--t", type=int, default=datagen.T_DEFAULT, help="timesteps")
    g.add_argument("--n", type=int, default=datagen.N_DEFAULT, help="features")
    g.add_argument("--amplitude", type=float, default=1.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and write an ICAT checkpoint plus a training log")
    t.add_argument("--model", required=True, help="e.g. lstm, lstm-incell, lstm-incell-partial(10), lstm-maxpool")
    t.add_argument("--data", required=True, help="training ICTS file")
    t.add_argument("--test-data", required=True, help="held-out ICTS file for checkpoint selection")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    t.add_argument("--config", help="INI file with [train] and [model] sections")
    t.add_argument("--optimizer", choices=("adam", "sgd"))
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--precision", choices=("float64", "float32"))
    t.add_argument("--seed", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--d-a", type=int)
    t.add_argument("--hops", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("saliency", help="export saliency maps (CSV + PGM) and an index file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--samples", type=int, default=10, help="export the first N samples")
    s.add_argument("--indices", help="comma-separated sample indices (overrides --samples)")
    s.add_argument("--target", choices=("predicted", "label"), default="predicted")
    s.set_defaults(func=cmd_saliency)

    e = sub.add_parser("evaluate", help="accuracy and saliency metrics of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="report CSV path")
    e.add_argument("--name", help="dataset name for the report (default: file stem)")
    e.add_argument("--seed", type=int, default=0, help="seed recorded in the report row")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("experiment", help="run an experiment suite from an INI spec")
    x.add_argument("spec")
    x.add_argument("--output-dir")
    x.add_argument("--workers", type=int)
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, cfg.ConfigError, datagen.DataFormatError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FloatingPointError, ExperimentError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
