"""LSTM and input-cell attention LSTM built on :mod:`cellattn.autodiff`.

Two execution paths share the same parameters:

* the *step* path (:func:`lstm_step`, :func:`attend`, :func:`cell_attention_step`)
  processes one sample one timestep at a time out of primitive ops, exactly
  mirroring the gate equations;
* the *batched* path (:meth:`Model.scores`) runs a whole ``[B, T, N]`` batch,
  computes every attention window at once with a causal mask and hands the
  recurrence to the fused :func:`~cellattn.autodiff.lstm_sequence` op.

Row-vector convention throughout: ``x_t @ W_xi`` with ``W_xi`` of shape
``[input_dim, h]``.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, fields, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

GATES = ("i", "f", "o", "c")
HEADS = ("last", "max", "mean", "selfattn")


@dataclass
class LstmParams:
    W_xi: Tensor
    W_xf: Tensor
    W_xo: Tensor
    W_xc: Tensor
    W_hi: Tensor
    W_hf: Tensor
    W_ho: Tensor
    W_hc: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_c: Tensor

    def __post_init__(self):
        d, h = self.W_xi.shape
        for g in GATES:
            if getattr(self, f"W_x{g}").shape != (d, h):
                raise ShapeError(f"W_x{g} must be {(d, h)}")
            if getattr(self, f"W_h{g}").shape != (h, h):
                raise ShapeError(f"W_h{g} must be {(h, h)}")
            if getattr(self, f"b_{g}").shape != (h,):
                raise ShapeError(f"b_{g} must be {(h,)}")

    @property
    def input_dim(self) -> int:
        return self.W_xi.shape[0]

    @property
    def hidden(self) -> int:
        return self.W_xi.shape[1]

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f.name) for f in fields(self)]


@dataclass
class CellAttentionParams:
    W_1: Tensor
    W_2: Tensor
    inner: LstmParams
    mode: str = "averaged"

    def __post_init__(self):
        if self.mode not in ("averaged", "full"):
            raise ValueError(f"unknown attention mode {self.mode!r}")
        d_a, n = self.W_1.shape
        r = self.W_2.shape[0]
        if d_a < 1 or r < 1 or self.W_2.shape != (r, d_a):
            raise ShapeError(f"W_2 {self.W_2.shape} incompatible with W_1 {self.W_1.shape}")
        expected = r * n if self.mode == "full" else n
        if self.inner.input_dim != expected:
            raise ShapeError(f"{self.mode} mode needs inner input dim {expected}, got {self.inner.input_dim}")

    @property
    def n_features(self) -> int:
        return self.W_1.shape[1]

    @property
    def hops(self) -> int:
        return self.W_2.shape[0]


@dataclass
class CellState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden: int) -> "CellState":
        return cls(ad.tensor(np.zeros(hidden)), ad.tensor(np.zeros(hidden)))


@dataclass
class AttentionOutput:
    A: Tensor
    M: Tensor
    m_tilde: Tensor | None = None


# -- step path ----------------------------------------------------------------

def lstm_step_gates(params: LstmParams, x: Tensor, prev: CellState) -> tuple[CellState, dict[str, Tensor]]:
    """One LSTM step; also returns the activated gates keyed by ``i, f, o, c``."""
    x = ad._as_tensor(x)
    d, h = params.input_dim, params.hidden
    if x.shape != (d,) or prev.h.shape != (h,) or prev.c.shape != (h,):
        raise ShapeError(f"lstm_step: x {x.shape}, h {prev.h.shape}, c {prev.c.shape} vs params ({d}, {h})")
    x_row = ad.reshape(x, (1, d))
    h_row = ad.reshape(prev.h, (1, h))
    pre = {
        g: ad.add_bias(
            ad.matmul(x_row, getattr(params, f"W_x{g}")) + ad.matmul(h_row, getattr(params, f"W_h{g}")),
            getattr(params, f"b_{g}"),
        )
        for g in GATES
    }
    gates = {g: ad.sigmoid(pre[g]) for g in "ifo"}
    gates["c"] = ad.tanh(pre["c"])
    c = gates["f"] * ad.reshape(prev.c, (1, h)) + gates["i"] * gates["c"]
    h_new = gates["o"] * ad.tanh(c)
    flat = {g: ad.reshape(v, (h,)) for g, v in gates.items()}
    return CellState(ad.reshape(h_new, (h,)), ad.reshape(c, (h,))), flat


def lstm_step(params: LstmParams, x: Tensor, prev: CellState) -> CellState:
    return lstm_step_gates(params, x, prev)[0]


def attend(params: CellAttentionParams, X_t: Tensor, attention_override=None) -> AttentionOutput:
    """Attention over the ``t x N`` window of inputs seen so far.

    ``attention_override`` replaces the ``r x t`` weight matrix with a fixed
    array; it exists so tests can pin where each hop looks.
    """
    X_t = ad._as_tensor(X_t)
    if X_t.ndim != 2 or X_t.shape[0] < 1 or X_t.shape[1] != params.n_features:
        raise ShapeError(f"attend: window {X_t.shape} for {params.n_features} features")
    r = params.hops
    if attention_override is None:
        scores = ad.matmul(params.W_2, ad.tanh(ad.matmul(params.W_1, ad.transpose(X_t))))
        A = ad.softmax_rows(scores)
    else:
        A = ad.tensor(attention_override)
        if A.shape != (r, X_t.shape[0]):
            raise ShapeError(f"attention override must be {(r, X_t.shape[0])}")
    M = ad.matmul(A, X_t)
    m_tilde = ad.scale(ad.sum_axis(M, 0), 1.0 / r) if params.mode == "averaged" else None
    return AttentionOutput(A, M, m_tilde)


def cell_attention_step(params: CellAttentionParams, X_t: Tensor, prev: CellState,
                        attention_override=None) -> CellState:
    att = attend(params, X_t, attention_override)
    if params.mode == "full":
        inp = ad.reshape(att.M, (att.M.shape[0] * att.M.shape[1],))  # hop-major
    else:
        inp = att.m_tilde
    return lstm_step(params.inner, inp, prev)


# -- model --------------------------------------------------------------------

_NAME_RE = re.compile(r"^lstm((?:-[a-z]+(?:\(\d+\))?)*)$")


@dataclass(frozen=True)
class ModelSpec:
    n_features: int
    n_classes: int
    cell: str = "lstm"
    head: str = "last"
    hidden: int = 64
    d_a: int = 50
    hops: int = 10
    mode: str = "averaged"
    partial: int | None = None
    t_max: int = 0

    def __post_init__(self):
        if self.cell not in ("lstm", "incell"):
            raise ValueError(f"unknown cell {self.cell!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.mode not in ("averaged", "full"):
            raise ValueError(f"unknown attention mode {self.mode!r}")
        if min(self.n_features, self.n_classes, self.hidden, self.d_a, self.hops) < 1:
            raise ValueError("model dimensions must be positive")
        if self.partial is not None:
            if self.cell != "incell" or self.mode != "averaged" or self.partial < 1:
                raise ValueError("partial attention needs an averaged input-cell model and k >= 1")

    @property
    def name(self) -> str:
        parts = ["lstm"]
        if self.cell == "incell":
            parts.append("incell")
            if self.mode == "full":
                parts.append("full")
            if self.partial is not None:
                parts.append(f"partial({self.partial})")
        parts.append({"last": "", "max": "maxpool", "mean": "meanpool", "selfattn": "selfattn"}[self.head])
        return "-".join(p for p in parts if p)

    @classmethod
    def from_name(cls, name: str, n_features: int, n_classes: int, **dims) -> "ModelSpec":
        """Parse names like ``lstm``, ``lstm-incell``, ``lstm-incell-partial(10)``, ``lstm-maxpool``."""
        m = _NAME_RE.match(name.strip().lower())
        if not m:
            raise ValueError(f"bad model name {name!r}")
        kw = dict(cell="lstm", head="last", mode="averaged", partial=None)
        for token in filter(None, m.group(1).split("-")):
            if token == "incell":
                kw["cell"] = "incell"
            elif token == "full":
                kw["mode"] = "full"
            elif token.startswith("partial("):
                kw["partial"] = int(token[8:-1])
            elif token in ("maxpool", "meanpool", "selfattn"):
                kw["head"] = {"maxpool": "max", "meanpool": "mean", "selfattn": "selfattn"}[token]
            elif token == "bilstm":
                raise ValueError("the bidirectional baseline is not implemented")
            else:
                raise ValueError(f"unknown model token {token!r} in {name!r}")
        if kw["mode"] == "full" and kw["cell"] != "incell":
            raise ValueError("'full' applies to input-cell attention only")
        return cls(n_features=n_features, n_classes=n_classes, **kw, **dims)

    @property
    def cell_input_dim(self) -> int:
        if self.cell == "incell" and self.mode == "full":
            return self.hops * self.n_features
        return self.n_features

    @property
    def head_dim(self) -> int:
        return self.hops * self.hidden if self.head == "selfattn" else self.hidden

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter names and shapes in declaration (checkpoint) order."""
        d, h = self.cell_input_dim, self.hidden
        shapes: dict[str, tuple[int, ...]] = {}
        for g in GATES:
            shapes[f"W_x{g}"] = (d, h)
        for g in GATES:
            shapes[f"W_h{g}"] = (h, h)
        for g in GATES:
            shapes[f"b_{g}"] = (h,)
        if self.cell == "incell":
            shapes["W_1"] = (self.d_a, self.n_features)
            shapes["W_2"] = (self.hops, self.d_a)
        if self.head == "selfattn":
            shapes["S_1"] = (self.d_a, h)
            shapes["S_2"] = (self.hops, self.d_a)
        shapes["W_out"] = (self.head_dim, self.n_classes)
        shapes["b_out"] = (self.n_classes,)
        return shapes


class Model:
    """A model spec plus one tensor per named parameter."""

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray | Tensor]):
        shapes = spec.param_shapes()
        if list(params) != list(shapes):
            missing = set(shapes) ^ set(params)
            if missing:
                raise ShapeError(f"parameter set mismatch: {sorted(missing)}")
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            value = params[name]
            data = value.data if isinstance(value, Tensor) else value
            t = ad.tensor(data, requires_grad=True, name=name)
            if t.shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {t.shape}")
            self.params[name] = t

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "Model":
        return cls(spec, {k: np.zeros(s) for k, s in spec.param_shapes().items()})

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.data.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "Model":
        with ad.precision(dtype):
            return Model(self.spec, {k: v.data for k, v in self.params.items()})

    def lstm_params(self) -> LstmParams:
        return LstmParams(**{n: self.params[n] for n in (f.name for f in fields(LstmParams))})

    def attention_params(self) -> CellAttentionParams:
        if self.spec.cell != "incell":
            raise ValueError("model has no input-cell attention")
        return CellAttentionParams(self.params["W_1"], self.params["W_2"], self.lstm_params(), self.spec.mode)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # batched path

    def encode(self, X: Tensor) -> Tensor:
        """Hidden states ``[B, T, h]`` for a batch ``[B, T, N]``."""
        spec = self.spec
        b, t_len, n = X.shape
        inp = X
        if spec.cell == "incell":
            inp = attention_inputs(self.params["W_1"], self.params["W_2"], X, spec.mode)
            if spec.partial is not None and spec.partial < t_len:
                split = t_len - spec.partial
                inp = ad.concat([ad.getitem(X, np.s_[:, :split, :]), ad.getitem(inp, np.s_[:, split:, :])], axis=1)
        d = inp.shape[2]
        w_x = ad.concat([self.params[f"W_x{g}"] for g in GATES], axis=1)
        w_h = ad.concat([self.params[f"W_h{g}"] for g in GATES], axis=1)
        bias = ad.concat([self.params[f"b_{g}"] for g in GATES], axis=0)
        gates_x = ad.add_bias(ad.matmul(ad.reshape(inp, (b * t_len, d)), w_x), bias)
        return ad.lstm_sequence(ad.reshape(gates_x, (b, t_len, 4 * spec.hidden)), w_h)

    def head(self, H: Tensor) -> Tensor:
        """Class scores ``[B, C]`` from hidden states ``[B, T, h]``."""
        spec = self.spec
        b, t_len, h = H.shape
        if spec.head == "last":
            z = ad.getitem(H, np.s_[:, t_len - 1, :])
        elif spec.head == "max":
            z = ad.max_axis(H, 1)
        elif spec.head == "mean":
            z = ad.mean_axis(H, 1)
        else:
            u = ad.tanh(ad.matmul(ad.reshape(H, (b * t_len, h)), ad.transpose(self.params["S_1"])))
            logits = ad.reshape(ad.matmul(u, ad.transpose(self.params["S_2"])), (b, t_len, spec.hops))
            A = ad.softmax_rows(ad.transpose(logits, (0, 2, 1)))
            z = ad.reshape(ad.matmul(A, H), (b, spec.hops * h))
        return ad.add_bias(ad.matmul(z, self.params["W_out"]), self.params["b_out"])

    def scores(self, X, cell_fn: Callable[[Tensor], Tensor] | None = None) -> Tensor:
        """Raw class scores ``[B, C]`` for inputs ``[B, T, N]``.

        ``cell_fn`` substitutes the recurrent encoder (tests use an identity
        stub to check the heads in isolation).
        """
        X = ad._as_tensor(X)
        if X.ndim != 3 or X.shape[2] != self.spec.n_features:
            raise ShapeError(f"expected [B, T, {self.spec.n_features}] input, got {X.shape}")
        if X.shape[1] < 1:
            raise ShapeError("sequence length must be at least 1")
        H = (cell_fn or self.encode)(X)
        return self.head(H)

    def predict(self, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.scores(X[i:i + batch_size]).data for i in range(0, len(X), batch_size)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.spec.n_classes))


def attention_inputs(W_1: Tensor, W_2: Tensor, X: Tensor, mode: str = "averaged") -> Tensor:
    """Attention embeddings for every timestep of a batch at once.

    Row ``t`` of each hop's weight matrix is the softmax over steps ``1..t``,
    i.e. exactly the window attention recomputed at every step.  Returns
    ``[B, T, N]`` (hop average) or ``[B, T, r*N]`` (hop-major flattening).
    """
    b, t_len, n = X.shape
    r = W_2.shape[0]
    u = ad.tanh(ad.matmul(ad.reshape(X, (b * t_len, n)), ad.transpose(W_1)))
    logits = ad.transpose(ad.reshape(ad.matmul(u, ad.transpose(W_2)), (b, t_len, r)), (0, 2, 1))
    if mode == "averaged":
        return ad.causal_hop_mean(logits, X)
    per_query = ad.repeat(logits, axis=2, n=t_len)
    A = ad.masked_softmax_rows(per_query, np.broadcast_to(ad.causal_mask(t_len), per_query.shape))
    M = ad.matmul(A, ad.repeat(X, axis=1, n=r))
    return ad.reshape(ad.transpose(M, (0, 2, 1, 3)), (b, t_len, r * n))


def run_sequence(model: Model, X, path: str = "batched") -> Tensor:
    """Scores ``[C]`` for one ``T x N`` sample.

    ``path="step"`` unrolls :func:`lstm_step` / :func:`cell_attention_step`
    one timestep at a time; ``"batched"`` uses the fused recurrence.
    """
    X = ad._as_tensor(X)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ShapeError(f"run_sequence needs a non-empty T x N sample, got {X.shape}")
    t_len, n = X.shape
    if path == "batched":
        return ad.reshape(model.scores(ad.reshape(X, (1, t_len, n))), (model.spec.n_classes,))
    if path != "step":
        raise ValueError(f"unknown path {path!r}")
    spec = model.spec
    inner = model.lstm_params()
    att = model.attention_params() if spec.cell == "incell" else None
    state = CellState.zeros(spec.hidden)
    hs = []
    first_attended = 0
    if att is not None and spec.partial is not None:
        first_attended = max(0, t_len - spec.partial)
    for t in range(t_len):
        if att is None or t < first_attended:
            state = lstm_step(inner, ad.getitem(X, t), state)
        else:
            state = cell_attention_step(att, ad.getitem(X, np.s_[: t + 1]), state)
        hs.append(state.h)
    H = ad.reshape(ad.stack(hs, axis=0), (1, t_len, spec.hidden))
    return ad.reshape(model.head(H), (spec.n_classes,))


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = b"ICAT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path) -> None:
    """Write ``model`` in the ICAT layout.

    ``magic | u16 version | u16 tag length | tag (utf-8 model name) |
    u32 N, T-max, h, d_a, r, C | parameters as little-endian float64 in
    declaration order``.
    """
    spec = model.spec
    tag = spec.name.encode()
    header = CHECKPOINT_MAGIC + struct.pack("<HH", CHECKPOINT_VERSION, len(tag)) + tag
    header += struct.pack("<6I", spec.n_features, spec.t_max, spec.hidden, spec.d_a, spec.hops, spec.n_classes)
    with open(path, "wb") as fh:
        fh.write(header)
        for t in model.params.values():
            fh.write(t.data.astype("<f8").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, tag_len = struct.unpack_from("<HH", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        tag = blob[8:8 + tag_len].decode()
        n, t_max, h, d_a, r, c = struct.unpack_from("<6I", blob, 8 + tag_len)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    spec = replace(ModelSpec.from_name(tag, n, c, hidden=h, d_a=d_a, hops=r), t_max=t_max)
    offset = 8 + tag_len + 24
    params = {}
    for name, shape in spec.param_shapes().items():
        count = int(np.prod(shape))
        if offset + 8 * count > len(blob):
            raise CheckpointError(f"{path}: truncated at parameter {name} (byte {offset})")
        params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return Model(spec, params)
