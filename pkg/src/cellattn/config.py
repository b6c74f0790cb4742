"""INI configuration files for training and experiment runs.

Schema (every key optional; command-line flags override file values)::

    [train]
    optimizer = adam          ; adam | sgd
    learning_rate = 0.001
    batch_size = 32
    max_epochs = 200
    patience = 10
    min_delta = 0.0001
    precision = float64       ; float64 | float32
    clip_norm =               ; empty = no clipping
    seed = 0

    [model]
    hidden = 64
    d_a = 50
    hops = 10

    [experiment]
    suite = static-box        ; static-box | moving-box | decay | mnist | feature-drop
    models = lstm, lstm-incell
    datasets = earlier, latter
    seeds = 0, 1, 2
    output_dir = results
    cache_dir =               ; empty = <output_dir>/cache
    n_train = 1000
    n_test = 300
    heatmaps = 4
    workers = 1
    percents = 1, 2, 5, 10, 20, 50

    [mnist]
    train_images = train-images-idx3-ubyte
    train_labels = train-labels-idx1-ubyte
    test_images = t10k-images-idx3-ubyte
    test_labels = t10k-labels-idx1-ubyte

Relative paths in ``[experiment]`` and ``[mnist]`` resolve against the
config file's directory.
"""

from __future__ import annotations

import configparser
from pathlib import Path

from .experiments import ExperimentSpec
from .training import TrainConfig

TRAIN_KEYS = {
    "optimizer": str, "learning_rate": float, "batch_size": int, "max_epochs": int, "patience": int,
    "min_delta": float, "precision": str, "seed": int,
}
MODEL_KEYS = {"hidden": int, "d_a": int, "hops": int}
EXPERIMENT_KEYS = {"suite", "models", "datasets", "seeds", "output_dir", "cache_dir", "n_train", "n_test",
                   "heatmaps", "workers", "percents"}
MNIST_KEYS = {"train_images", "train_labels", "test_images", "test_labels"}
SECTIONS = {"train": set(TRAIN_KEYS) | {"clip_norm"}, "model": set(MODEL_KEYS),
            "experiment": EXPERIMENT_KEYS, "mnist": MNIST_KEYS}


class ConfigError(ValueError):
    pass


def read(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        unknown = set(parser[section]) - SECTIONS[section]
        if unknown:
            raise ConfigError(f"{path}: unknown keys in [{section}]: {', '.join(sorted(unknown))}")
    return parser


def _section(parser, name) -> dict[str, str]:
    return dict(parser[name]) if parser is not None and parser.has_section(name) else {}


def _convert(raw: dict[str, str], types: dict) -> dict:
    out = {}
    for key, typ in types.items():
        if key in raw and raw[key].strip() != "":
            try:
                out[key] = typ(raw[key].strip())
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw[key]!r}") from exc
    return out


def _split(value: str) -> list[str]:
    # commas separate items, but not inside "moving(40)"-style parentheses
    items, depth, cur = [], 0, ""
    for ch in value:
        if ch == "," and depth == 0:
            items.append(cur)
            cur = ""
            continue
        depth += (ch == "(") - (ch == ")")
        cur += ch
    items.append(cur)
    return [i.strip() for i in items if i.strip()]


def train_config(parser=None, overrides: dict | None = None) -> TrainConfig:
    raw = _section(parser, "train")
    kw = _convert(raw, TRAIN_KEYS)
    clip = raw.get("clip_norm", "").strip()
    if clip:
        kw["clip_norm"] = float(clip)
    kw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def model_dims(parser=None, overrides: dict | None = None) -> dict:
    kw = _convert(_section(parser, "model"), MODEL_KEYS)
    kw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return kw


def experiment_spec(path, overrides: dict | None = None) -> ExperimentSpec:
    parser = read(path)
    base = Path(path).resolve().parent
    raw = _section(parser, "experiment")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    kw: dict = {}
    try:
        for key in ("suite",):
            if key in raw:
                kw[key] = raw[key].strip()
        for key in ("models", "datasets"):
            if key in raw:
                kw[key] = _split(raw[key])
        if "seeds" in raw:
            kw["seeds"] = [int(s) for s in _split(raw["seeds"])]
        if "percents" in raw:
            kw["percents"] = [float(p) for p in _split(raw["percents"])]
        for key in ("n_train", "n_test", "heatmaps", "workers"):
            if key in raw:
                kw[key] = int(raw[key])
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for key in ("output_dir", "cache_dir"):
        if raw.get(key, "").strip():
            kw[key] = base / raw[key].strip()
    mn = _section(parser, "mnist")
    if mn:
        missing = MNIST_KEYS - set(mn)
        if missing:
            raise ConfigError(f"{path}: [mnist] is missing {', '.join(sorted(missing))}")
        kw["mnist_train"] = (str(base / mn["train_images"]), str(base / mn["train_labels"]))
        kw["mnist_test"] = (str(base / mn["test_images"]), str(base / mn["test_labels"]))
    kw.update(model_dims(parser))
    kw["train"] = train_config(parser)
    kw.update(overrides)
    if "suite" not in kw or "models" not in kw:
        raise ConfigError(f"{path}: [experiment] needs at least suite and models")
    spec = ExperimentSpec(**kw)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return spec
