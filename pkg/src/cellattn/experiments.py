"""Experiment suites: static box, moving box, gradient decay, MNIST and feature drop.

Every (model, dataset, seed) cell trains independently, so cells run in a
bounded process pool; results are assembled in request order by a single
writer, which keeps report bytes independent of the worker count.

Trained models and generated datasets are cached under ``cache_dir`` (by
default ``<output_dir>/cache``).  Dataset files are named by kind, seed and
sizes; model files by a hash of the model spec, the dataset content hash and
the training config, so a cache hit is always the same computation.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import datagen, metrics, saliency
from .cells import Model, ModelSpec, load_checkpoint, save_checkpoint
from .training import DivergenceError, TrainConfig, train

SUITES = ("static-box", "moving-box", "decay", "mnist", "feature-drop")
MODELS = ("lstm", "lstm-incell", "lstm-selfattn", "lstm-maxpool", "lstm-meanpool")
REPORT_COLUMNS = ("suite", "dataset", "model", "seed", "wjac", "euc", "acc", "n_correct", "offtask", "status")
MNIST_DATASET = "mnist167"
DEFAULT_PERCENTS = (1.0, 2.0, 5.0, 10.0, 20.0, 50.0)


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentSpec:
    suite: str
    models: Sequence[str]
    datasets: Sequence[str] = ()
    seeds: Sequence[int] = (0, 1, 2)
    output_dir: str | Path = "results"
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden: int = 64
    d_a: int = 50
    hops: int = 10
    n_train: int = 1000
    n_test: int = 300
    heatmaps: int = 4
    workers: int = 1
    percents: Sequence[float] = DEFAULT_PERCENTS
    mnist_train: tuple[str, str] | None = None
    mnist_test: tuple[str, str] | None = None
    cache_dir: str | Path | None = None

    def __post_init__(self):
        self.models = tuple(self.models)
        self.datasets = tuple(self.datasets)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.percents = tuple(float(p) for p in self.percents)
        self.output_dir = Path(self.output_dir)

    def validate(self) -> None:
        if self.suite not in SUITES:
            raise ValueError(f"unknown suite {self.suite!r}; expected one of {SUITES}")
        if not self.models:
            raise ValueError("experiment needs at least one model")
        if not self.seeds:
            raise ValueError("experiment needs at least one seed")
        for name in self.models:
            ModelSpec.from_name(name, 1, 2)
        if self.suite == "mnist":
            if not (self.mnist_train and self.mnist_test):
                raise ValueError("mnist suite needs train and test IDX image/label paths")
        elif not self.datasets:
            raise ValueError(f"{self.suite} suite needs at least one dataset")
        else:
            for kind in self.datasets:
                datagen.parse_kind(kind)
        if self.suite == "feature-drop" and (not self.percents or any(not 0 < p <= 100 for p in self.percents)):
            raise ValueError("feature-drop percents must lie in (0, 100]")
        if self.workers < 1 or self.heatmaps < 0 or self.n_train < 2 or self.n_test < 2:
            raise ValueError("workers >= 1, heatmaps >= 0 and at least 2 samples per split required")
        self.train.validate()

    @property
    def cache(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir is not None else self.output_dir / "cache"


@dataclass
class ExperimentReport:
    rows: list[dict] = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    flagged: list[str] = field(default_factory=list)

    def median(self, dataset: str, model: str, column: str) -> float:
        vals = [r[column] for r in self.rows if r["dataset"] == dataset and r["model"] == model and r["status"] == "ok"]
        return float(np.median(vals)) if vals else float("nan")


# -- datasets -----------------------------------------------------------------

def load_or_generate(kind: str, seed: int, n_train: int, n_test: int, cache: Path):
    """Train/test split for a box kind, through the on-disk cache."""
    folder = cache / "datasets"
    folder.mkdir(parents=True, exist_ok=True)
    out = []
    for split, n in (("train", n_train), ("test", n_test)):
        path = folder / f"{kind}_s{seed}_{split}{n}.icts"
        if path.exists():
            ds = datagen.load_dataset(path, split)
            ds.name = kind
        else:
            ds = datagen.generate_box_dataset(kind, n, seed, split)
            tmp = path.with_suffix(f".tmp{os.getpid()}")
            datagen.save_dataset(ds, tmp)
            os.replace(tmp, path)
        out.append(ds)
    return tuple(out)


def load_mnist(spec: ExperimentSpec):
    tr = datagen.load_mnist_timeseries(*spec.mnist_train, split="train")
    te = datagen.load_mnist_timeseries(*spec.mnist_test, split="test")
    tr.name = te.name = MNIST_DATASET
    return tr, te


def box_offtask_window(kind: str, t_len: int) -> tuple[int, int] | None:
    """Pure-noise tail after the last box timestep, used as a negative control."""
    layout = datagen.box_layout(kind, t_len)
    if not layout:
        return None
    end = max(b.time_end for b in layout)
    return (end, t_len) if end < t_len else None


# -- training cells -------------------------------------------------------------

def model_key(mspec: ModelSpec, data_hash: str, config: TrainConfig) -> str:
    blob = json.dumps([mspec.name, dataclasses.asdict(mspec), data_hash, dataclasses.asdict(config)], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def _train_job(job) -> tuple[str, dict]:
    """Train one cell unless cached; returns (checkpoint path, training summary)."""
    mspec, tr, te, config, cache = job
    key = model_key(mspec, datagen.content_hash(tr) + datagen.content_hash(te), config)
    folder = Path(cache) / "models"
    folder.mkdir(parents=True, exist_ok=True)
    ckpt, meta_path = folder / f"{key}.icat", folder / f"{key}.json"
    if ckpt.exists() and meta_path.exists():
        return str(ckpt), json.loads(meta_path.read_text())
    try:
        result = train(mspec, tr, te, config)
    except DivergenceError as exc:
        return "", {"status": "diverged", "error": str(exc), "last_finite_epoch": exc.last_finite_epoch}
    tmp = ckpt.with_suffix(f".tmp{os.getpid()}")
    save_checkpoint(result.model, tmp)
    os.replace(tmp, ckpt)
    result.write_log(folder / f"{key}.log.csv")
    meta = {"status": "ok", "epochs_run": result.epochs_run, "best_epoch": result.best_epoch,
            "best_test_accuracy": result.best_test_accuracy}
    meta_path.write_text(json.dumps(meta))
    return str(ckpt), meta


def train_cells(spec: ExperimentSpec, cells: list[tuple[str, str, int, object, object]]) -> list[tuple[Model | None, dict]]:
    """Train ``(dataset, model, seed, train_set, test_set)`` cells; results keep the input order."""
    jobs = []
    for _, name, seed, tr, te in cells:
        mspec = ModelSpec.from_name(name, tr.N, tr.n_classes, hidden=spec.hidden, d_a=spec.d_a,
                                    hops=spec.hops, t_max=tr.T)
        jobs.append((mspec, tr, te, dataclasses.replace(spec.train, seed=seed), str(spec.cache)))
    if spec.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            done = list(pool.map(_train_job, jobs))
    else:
        done = [_train_job(j) for j in jobs]
    return [(load_checkpoint(path) if path else None, meta) for path, meta in done]


# -- per-cell evaluation --------------------------------------------------------

def correct_saliency(model: Model, test_set):
    """Predictions and saliency maps (on the predicted class) for correctly classified samples."""
    pred = model.predict(test_set.X).argmax(axis=1)
    ok = np.flatnonzero(pred == test_set.y)
    maps = saliency.saliency_maps(model, test_set.X[ok], pred[ok]) if len(ok) else np.zeros((0,) + test_set.X.shape[1:])
    return pred, ok, maps


def _row(suite, dataset, model, seed, **kw) -> dict:
    row = dict(suite=suite, dataset=dataset, model=model, seed=seed, wjac=float("nan"), euc=float("nan"),
               acc=float("nan"), n_correct=0, offtask=float("nan"), status="ok")
    row.update(kw)
    return row


def evaluate_cell(suite: str, dataset: str, name: str, seed: int, model: Model | None, meta: dict, test_set):
    if model is None:
        return _row(suite, dataset, name, seed, status=meta.get("status", "failed")), None
    pred, ok, maps = correct_saliency(model, test_set)
    acc = float(np.mean(pred == test_set.y))
    row = _row(suite, dataset, name, seed, acc=acc, n_correct=len(ok))
    if len(ok) == 0:
        row["status"] = "empty"
        return row, (pred, ok, maps)
    if test_set.masks is not None:
        row["wjac"], row["euc"] = metrics.evaluate_maps(test_set.X[ok], test_set.masks[ok], maps)
        window = box_offtask_window(dataset, test_set.T)
        if window is not None:
            row["offtask"] = float(np.mean([metrics.window_mass(r, *window) for r in maps]))
    return row, (pred, ok, maps)


# -- output ---------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else f"{float(v):.6f}"
    return str(v)


def append_csv(path: Path, columns: Sequence[str], rows: list[dict]) -> None:
    """Append rows, writing the header only when the file is new."""
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def median_rows(rows: list[dict]) -> list[dict]:
    out = []
    keys = []
    for r in rows:
        k = (r["suite"], r["dataset"], r["model"])
        if k not in keys:
            keys.append(k)
    for suite, dataset, model in keys:
        ok = [r for r in rows if (r["suite"], r["dataset"], r["model"]) == (suite, dataset, model) and r["status"] == "ok"]
        agg = _row(suite, dataset, model, "median", status="ok" if ok else "empty")
        for col in ("wjac", "euc", "acc", "offtask", "n_correct"):
            vals = [r[col] for r in ok if not np.isnan(r[col])]
            if vals:
                agg[col] = float(np.median(vals))
        out.append(agg)
    return out


def write_heatmaps(out_dir: Path, dataset: str, model_name: str, seed: int, test_set,
                   pred, ok, maps, count: int, index_rows: list[dict]) -> None:
    if count == 0 or len(ok) == 0:
        return
    folder = out_dir / "heatmaps" / dataset / model_name
    folder.mkdir(parents=True, exist_ok=True)
    for j in range(min(count, len(ok))):
        sample = int(ok[j])
        path = folder / f"{sample}.pgm"
        scale = saliency.write_pgm(maps[j], path)
        index_rows.append(dict(dataset=dataset, model=model_name, seed=seed, sample=sample,
                               target=int(pred[sample]), label=int(test_set.y[sample]),
                               correct=int(pred[sample] == test_set.y[sample]), scale=scale,
                               path=str(path.relative_to(out_dir))))


INDEX_COLUMNS = ("dataset", "model", "seed", "sample", "target", "label", "correct", "scale", "path")


def finish(spec: ExperimentSpec, report: ExperimentReport, index_rows: list[dict]) -> ExperimentReport:
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    append_csv(spec.output_dir / "report.csv", REPORT_COLUMNS, report.rows + median_rows(report.rows))
    if index_rows:
        append_csv(spec.output_dir / "heatmaps" / "index.csv", INDEX_COLUMNS,
                   [dict(r, scale=f"{r['scale']:.9g}") for r in index_rows])
    report.flagged += [f"{r['dataset']}/{r['model']}/seed {r['seed']}: no correctly classified test samples"
                       for r in report.rows if r["status"] == "empty"]
    bad = [r for r in report.rows if r["status"] not in ("ok", "empty")]
    if bad:
        report.flagged += [f"{r['dataset']}/{r['model']}/seed {r['seed']}: {r['status']}" for r in bad]
        raise ExperimentError("training failed for " + "; ".join(report.flagged))
    return report


# -- suites -----------------------------------------------------------------------

def _box_cells(spec: ExperimentSpec, kinds: Sequence[str]):
    cells = []
    for kind in kinds:
        for name in spec.models:
            for seed in spec.seeds:
                tr, te = load_or_generate(kind, seed, spec.n_train, spec.n_test, spec.cache)
                cells.append((kind, name, seed, tr, te))
    return cells


def _run_box(spec: ExperimentSpec, suite: str, kinds: Sequence[str]):
    cells = _box_cells(spec, kinds)
    trained = train_cells(spec, cells)
    report, index_rows, details = ExperimentReport(), [], []
    for (kind, name, seed, _, te), (model, meta) in zip(cells, trained):
        row, extra = evaluate_cell(suite, kind, name, seed, model, meta, te)
        report.rows.append(row)
        details.append((kind, name, seed, te, model, extra))
        if extra is not None and seed == spec.seeds[0]:
            write_heatmaps(spec.output_dir, kind, name, seed, te, *extra, spec.heatmaps, index_rows)
    return report, index_rows, details


def run_static_box(spec: ExperimentSpec) -> ExperimentReport:
    spec.validate()
    report, index_rows, _ = _run_box(spec, "static-box", spec.datasets)
    return finish(spec, report, index_rows)


def run_moving_box(spec: ExperimentSpec) -> ExperimentReport:
    """WJac/Euc as a function of box start; datasets are ``moving(start)`` kinds."""
    spec.validate()
    kinds = list(spec.datasets)
    starts = []
    for k in kinds:
        base, start = datagen.parse_kind(k)
        if base != "moving":
            raise ValueError(f"moving-box suite takes moving(start) datasets, got {k!r}")
        starts.append(start)
    report, index_rows, _ = _run_box(spec, "moving-box", kinds)
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    for name in spec.models:
        rows = []
        for kind, start in zip(kinds, starts):
            per_seed = [r for r in report.rows if r["dataset"] == kind and r["model"] == name]
            for r in per_seed:
                rows.append(dict(start=start, seed=r["seed"], wjac=r["wjac"], euc=r["euc"], acc=r["acc"]))
            med = median_rows(per_seed)[0]
            rows.append(dict(start=start, seed="median", wjac=med["wjac"], euc=med["euc"], acc=med["acc"]))
        append_csv(spec.output_dir / f"moving_{name}.csv", ("start", "seed", "wjac", "euc", "acc"), rows)
        report.curves[name] = [(r["start"], r["wjac"], r["euc"]) for r in rows if r["seed"] == "median"]
    return finish(spec, report, index_rows)


@dataclass
class DecayResult:
    model: str
    dataset: str
    profile: np.ndarray
    n_samples: int
    empty: bool = False

    def half_ratio(self) -> float:
        return saliency.DecayProfile(self.profile).half_ratio() if not self.empty else float("nan")

    def last_quarter_mass(self) -> float:
        if self.empty or self.profile.sum() == 0:
            return float("nan")
        return float(metrics.bucket_mass(self.profile[:, None], 4)[0][-1])


def run_decay(spec: ExperimentSpec) -> ExperimentReport:
    """Mean per-timestep gradient norm over correctly classified test samples, per model.

    Profiles are averaged over samples within a seed and then over seeds.
    """
    spec.validate()
    report, index_rows, details = _run_box(spec, "decay", spec.datasets)
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    for kind in spec.datasets:
        for name in spec.models:
            profiles, count = [], 0
            for d_kind, d_name, seed, te, model, extra in details:
                if (d_kind, d_name) != (kind, name) or extra is None or len(extra[1]) == 0:
                    continue
                _, ok, maps = extra
                # |dS/dx| squared is the signed gradient squared, so the maps give g_t directly
                profiles.append(np.sqrt((maps ** 2).sum(axis=2)).mean(axis=0))
                count += len(ok)
            t_len = details[0][3].T
            if profiles:
                res = DecayResult(name, kind, np.mean(profiles, axis=0), count)
            else:
                res = DecayResult(name, kind, np.zeros(t_len), 0, empty=True)
                report.flagged.append(f"{kind}/{name}: empty decay profile")
            report.curves[(kind, name)] = res
            suffix = "" if len(spec.datasets) == 1 else f"_{kind}"
            append_csv(spec.output_dir / f"decay_{name}{suffix}.csv", ("t", "g"),
                       [dict(t=t, g=float(v)) for t, v in enumerate(res.profile)])
    return finish(spec, report, index_rows)


def early_mass(maps: np.ndarray, steps: int = 14) -> np.ndarray:
    """Per-map fraction of saliency in the first ``steps`` timesteps."""
    return np.array([metrics.window_mass(r, 0, steps) for r in maps])


def run_mnist(spec: ExperimentSpec) -> ExperimentReport:
    """Train on the 1/6/7 subset; per-class early-timestep saliency mass and 28x28 heatmaps."""
    spec.validate()
    tr, te = load_mnist(spec)
    cells = [(MNIST_DATASET, name, seed, tr, te) for name in spec.models for seed in spec.seeds]
    trained = train_cells(spec, cells)
    report, index_rows = ExperimentReport(), []
    mass_rows = {name: [] for name in spec.models}
    for (_, name, seed, _, _), (model, meta) in zip(cells, trained):
        row, extra = evaluate_cell("mnist", MNIST_DATASET, name, seed, model, meta, te)
        report.rows.append(row)
        if extra is None:
            continue
        pred, ok, maps = extra
        mass = early_mass(maps)
        for cls, digit in enumerate(datagen.MNIST_DIGITS):
            sel = te.y[ok] == cls
            med = float(np.median(mass[sel])) if sel.any() else float("nan")
            mass_rows[name].append(dict(seed=seed, digit=digit, n=int(sel.sum()), early_mass=med))
            report.curves[(name, seed, digit)] = med
            if seed == spec.seeds[0] and sel.any():
                # a few samples of every class, time down the rows
                pick = np.flatnonzero(sel)[: spec.heatmaps]
                write_heatmaps(spec.output_dir, MNIST_DATASET, name, seed, te, pred, ok[pick], maps[pick],
                               len(pick), index_rows)
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    for name, rows in mass_rows.items():
        append_csv(spec.output_dir / f"mnist_{name}.csv", ("seed", "digit", "n", "early_mass"), rows)
    return finish(spec, report, index_rows)


def run_feature_drop(spec: ExperimentSpec) -> ExperimentReport:
    """Accuracy after removing top-p% salient cells: self, cross-model and random conditions.

    Saliency here covers every test sample (target = the model's predicted
    class) since accuracy is measured over the whole test set.
    """
    spec.validate()
    cells = _box_cells(spec, spec.datasets)
    trained = train_cells(spec, cells)
    report, index_rows = ExperimentReport(), []
    curve_rows = {name: [] for name in spec.models}
    for kind in spec.datasets:
        for seed in spec.seeds:
            here = [(c, t) for c, t in zip(cells, trained) if c[0] == kind and c[2] == seed]
            te = here[0][0][4]
            models, maps = {}, {}
            for (_, name, _, _, _), (model, meta) in here:
                row, _ = evaluate_cell("feature-drop", kind, name, seed, model, meta, te)
                report.rows.append(row)
                if model is not None:
                    models[name] = model
                    maps[name] = saliency.saliency_maps(model, te.X, model.predict(te.X).argmax(axis=1))
            rand = metrics.random_saliency(te.X.shape, seed)
            for name, model in models.items():
                conditions = [("self", name, maps[name]), ("random", "random", rand)]
                conditions += [("cross", other, maps[other]) for other in models if other != name]
                for cond, source, R in conditions:
                    curve = metrics.feature_drop_eval(model, te.X, te.y, R, spec.percents)
                    report.curves[(kind, name, seed, cond, source)] = curve
                    curve_rows[name] += [dict(dataset=kind, seed=seed, condition=cond, source=source,
                                              percent=p, accuracy=a) for p, a in curve]
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    for name, rows in curve_rows.items():
        append_csv(spec.output_dir / f"drop_{name}.csv",
                   ("dataset", "seed", "condition", "source", "percent", "accuracy"), rows)
    return finish(spec, report, index_rows)


RUNNERS = {
    "static-box": run_static_box,
    "moving-box": run_moving_box,
    "decay": run_decay,
    "mnist": run_mnist,
    "feature-drop": run_feature_drop,
}


def run(spec: ExperimentSpec) -> ExperimentReport:
    spec.validate()
    return RUNNERS[spec.suite](spec)
