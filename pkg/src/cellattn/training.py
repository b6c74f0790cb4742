"""Mini-batch training: initialisation, optimizers and the epoch loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .cells import Model, ModelSpec
from .metrics import accuracy

# Sub-streams of the run seed: SeedSequence(seed, spawn_key=(TRAIN_DOMAIN, stream)).
# Dataset samples use spawn keys (split, index) with split in {0, 1}, so the
# domain value 2 keeps training streams disjoint from data streams.
TRAIN_DOMAIN = 2
INIT_STREAM = 0
SHUFFLE_STREAM = 1


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(TRAIN_DOMAIN, which))))


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, last_finite_epoch: int):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    min_delta: float = 1e-4
    seed: int = 0
    precision: str = "float64"
    clip_norm: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch size, patience and max epochs must be at least 1")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"unsupported precision {self.precision!r}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip norm must be positive")

    @property
    def dtype(self):
        return np.dtype(self.precision).type


@dataclass
class TrainResult:
    model: Model
    epochs_run: int
    train_loss: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_test_accuracy(self) -> float:
        return self.test_accuracy[self.best_epoch - 1] if self.test_accuracy else float("nan")

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "train_loss", "test_acc"))
            for i, (loss, acc) in enumerate(zip(self.train_loss, self.test_accuracy), start=1):
                w.writerow((i, f"{loss:.9g}", f"{acc:.6f}"))


def init_params(spec: ModelSpec, seed: int) -> Model:
    """Uniform ``[-1/sqrt(h), 1/sqrt(h)]`` matrices, zero biases, forget bias +1."""
    rng = stream(seed, INIT_STREAM)
    bound = 1.0 / math.sqrt(spec.hidden)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.startswith("b_"):
            params[name] = np.full(shape, 1.0) if name == "b_f" else np.zeros(shape)
        else:
            params[name] = rng.uniform(-bound, bound, size=shape)
    return Model(spec, params)


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, ad.Tensor], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


class SGD:
    def __init__(self, lr: float = 1e-2):
        self.lr = lr

    def step(self, params: dict[str, ad.Tensor], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            p.data -= (self.lr * grads[name]).astype(p.data.dtype)


def make_optimizer(config: TrainConfig):
    return Adam(config.learning_rate) if config.optimizer == "adam" else SGD(config.learning_rate)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


def batch_gradients(model: Model, X: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    model.zero_grad()
    # overflow surfaces as NonFiniteError from the ops, so the warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        loss = ad.cross_entropy(model.scores(X), y)
        ad.backward(loss)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}
    return float(loss.data), grads


def train(spec: ModelSpec, train_set, test_set, config: TrainConfig | None = None,
          progress=None) -> TrainResult:
    """Train from ``init_params(spec, config.seed)`` and return the best-test-accuracy model.

    Early stopping watches the epoch-mean training loss: after ``patience``
    epochs without an improvement of at least ``min_delta`` training stops.
    The returned model is the first epoch reaching the best test accuracy.
    """
    config = config or TrainConfig()
    config.validate()
    if train_set.N != spec.n_features or test_set.N != spec.n_features:
        raise ValueError(f"model expects {spec.n_features} features, data has {train_set.N}")
    if int(max(train_set.y.max(), test_set.y.max())) >= spec.n_classes:
        raise ValueError("dataset labels exceed the model's class count")
    dtype = config.dtype
    with ad.precision(dtype):
        model = init_params(spec, config.seed).astype(dtype)
        X_train = train_set.X.astype(dtype)
        X_test = test_set.X.astype(dtype)
        opt = make_optimizer(config)
        rng = stream(config.seed, SHUFFLE_STREAM)
        result = TrainResult(model=model.copy(), epochs_run=0)
        best_acc = -1.0
        best_loss = math.inf
        stale = 0
        for epoch in range(1, config.max_epochs + 1):
            order = rng.permutation(len(X_train))
            total, count = 0.0, 0
            for lo in range(0, len(order), config.batch_size):
                idx = order[lo:lo + config.batch_size]
                try:
                    loss, grads = batch_gradients(model, X_train[idx], train_set.y[idx])
                except ad.NonFiniteError as exc:
                    raise DivergenceError(f"epoch {epoch}: {exc}", epoch - 1) from exc
                if not math.isfinite(loss):
                    raise DivergenceError(f"loss became non-finite in epoch {epoch}", epoch - 1)
                if config.clip_norm is not None:
                    grads = clip_by_global_norm(grads, config.clip_norm)
                with np.errstate(over="ignore", invalid="ignore"):
                    opt.step(model.params, grads)
                if not all(np.isfinite(p.data).all() for p in model.params.values()):
                    raise DivergenceError(f"parameters became non-finite in epoch {epoch}", epoch - 1)
                total += loss * len(idx)
                count += len(idx)
            epoch_loss = total / count
            acc = accuracy(model.predict(X_test), test_set.y)
            result.train_loss.append(epoch_loss)
            result.test_accuracy.append(acc)
            result.epochs_run = epoch
            if acc > best_acc:
                best_acc = acc
                result.best_epoch = epoch
                result.model = model.copy()
            if progress is not None:
                progress(epoch, epoch_loss, acc)
            if epoch_loss < best_loss - config.min_delta:
                best_loss = epoch_loss
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
        result.model = result.model.astype(np.float64)
    return result
