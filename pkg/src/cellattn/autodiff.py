"""Tape-based reverse-mode differentiation over dense numpy arrays.

Every op builds a new :class:`Tensor` holding its parents and a closure that
maps the output gradient to one gradient per parent.  :func:`backward` walks
the graph in reverse topological order and accumulates gradients into
``Tensor.grad``.

Binary elementwise ops require identical shapes.  Adding a per-feature bias
to a batch of rows is a separate op (:func:`add_bias`); there is no implicit
broadcasting anywhere.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def get_dtype():
    return _DTYPE


def set_dtype(dtype) -> None:
    """Set the float type for newly created tensors (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported precision {dtype!r}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.parents = tuple(parents) if out.requires_grad else ()
    out.backward_fn = backward_fn if out.requires_grad else None
    out.op = op
    out.name = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands, or batched product with equal leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), backward, "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(tuple(shape)), (a,), backward, "reshape")


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    with np.errstate(invalid="ignore", over="ignore"):
        out = a.data * b.data
    return _make(out, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def scale(a, factor: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    a = _as_tensor(a)
    factor = float(factor)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = kernels.sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def add_bias(x, b) -> Tensor:
    """Add vector ``b`` to every row (last axis) of ``x``."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match rows of {x.shape}")
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        return g, g.sum(axis=lead)

    return _make(x.data + b.data, (x, b), backward, "add_bias")


# -- softmax ----------------------------------------------------------------

def _softmax_backward(out: np.ndarray, g: np.ndarray) -> np.ndarray:
    return out * (g - np.sum(g * out, axis=-1, keepdims=True))


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting each row's max."""
    x = _as_tensor(x)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_rows: empty rows in {x.shape}")
    z = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)
    return _make(out, (x,), lambda g: (_softmax_backward(out, g),), "softmax_rows")


def masked_softmax_rows(x, keep: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to entries where ``keep`` is true.

    Masked entries get probability exactly 0 and receive zero gradient.  Every
    row must keep at least one entry.
    """
    x = _as_tensor(x)
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != x.shape:
        raise ShapeError(f"masked_softmax_rows: mask {keep.shape} vs input {x.shape}")
    if not keep.any(axis=-1).all():
        raise ShapeError("masked_softmax_rows: a row has no unmasked entry")
    filled = np.where(keep, x.data, -np.inf)
    z = np.exp(filled - filled.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)
    return _make(out, (x,), lambda g: (_softmax_backward(out, g),), "masked_softmax_rows")


def causal_mask(t: int) -> np.ndarray:
    """``mask[q, k]`` is true when key step ``k`` is visible from query step ``q``."""
    return np.tril(np.ones((t, t), dtype=bool))


# -- reductions and indexing --------------------------------------------------

def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, g, dtype=a.data.dtype),), "sum")


def sum_axis(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    axis = axis % a.ndim

    def backward(g):
        return (np.repeat(np.expand_dims(g, axis), a.shape[axis], axis=axis),)

    return _make(a.data.sum(axis=axis), (a,), backward, "sum_axis")


def mean_axis(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    return scale(sum_axis(a, axis), 1.0 / a.shape[axis % a.ndim])


def max_axis(a, axis: int) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximising index."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _make(out, (a,), backward, "max_axis")


def repeat(a, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` holding ``n`` copies of ``a``."""
    a = _as_tensor(a)
    out = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return _make(out, (a,), lambda g: (g.sum(axis=axis),), "repeat")


def getitem(a, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    a = _as_tensor(a)

    def backward(g):
        grad = np.zeros_like(a.data)
        grad[index] = g
        return (grad,)

    return _make(np.array(a.data[index]), (a,), backward, "getitem")


def pick(a, indices: Sequence[int]) -> Tensor:
    """Select ``a[b, indices[b]]`` for each row ``b`` of a 2-D tensor."""
    a = _as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    if a.ndim != 2 or indices.shape != (a.shape[0],):
        raise ShapeError(f"pick: {indices.shape} indices for {a.shape}")
    rows = np.arange(a.shape[0])

    def backward(g):
        grad = np.zeros_like(a.data)
        grad[rows, indices] = g
        return (grad,)

    return _make(a.data[rows, indices], (a,), backward, "pick")


def concat(parts: Sequence, axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    ndim = parts[0].ndim
    axis = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim or p.shape[:axis] + p.shape[axis + 1:] != parts[0].shape[:axis] + parts[0].shape[axis + 1:]:
            raise ShapeError(f"concat: {p.shape} incompatible with {parts[0].shape} on axis {axis}")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    for p in parts[1:]:
        _same_shape("stack", parts[0], p)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _make(np.stack([p.data for p in parts], axis=axis), parts, backward, "stack")


def cross_entropy(scores, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(scores)``."""
    scores = _as_tensor(scores)
    labels = np.asarray(labels, dtype=np.intp)
    if scores.ndim != 2 or labels.shape != (scores.shape[0],):
        raise ShapeError(f"cross_entropy: {labels.shape} labels for scores {scores.shape}")
    n = scores.shape[0]
    shifted = scores.data - scores.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss), (scores,), backward, "cross_entropy")


# largest logit spread for which exp(l - max) cannot underflow to an all-zero prefix
_PREFIX_SOFTMAX_RANGE = 600.0


def causal_hop_mean(logits, X) -> Tensor:
    """Hop-averaged causal attention readout for every query step at once.

    ``logits`` is ``[B, r, T]`` and ``X`` is ``[B, T, N]``.  For each query
    step ``q`` every hop takes a softmax over keys ``0..q``; the ``r`` weight
    rows are averaged and applied to ``X``, giving ``[B, T, N]``.  This equals
    ``masked_softmax_rows`` on the logits repeated over queries, but works
    from prefix sums of ``exp(logits)`` instead of an ``r x T x T`` tensor per
    sample.  Falls back to that reference form when the logit spread could
    underflow the prefix sums.
    """
    logits, X = _as_tensor(logits), _as_tensor(X)
    if logits.ndim != 3 or X.ndim != 3 or logits.shape[0] != X.shape[0] or logits.shape[2] != X.shape[1]:
        raise ShapeError(f"causal_hop_mean: logits {logits.shape} vs inputs {X.shape}")
    b, r, t_len = logits.shape
    top = logits.data.max(axis=2, keepdims=True)
    if (top - logits.data).max() > _PREFIX_SOFTMAX_RANGE:
        per_query = repeat(logits, axis=2, n=t_len)
        A = masked_softmax_rows(per_query, np.broadcast_to(causal_mask(t_len), per_query.shape))
        return matmul(mean_axis(A, 1), X)
    tril = causal_mask(t_len)
    E = np.exp(logits.data - top)
    inv_z = 1.0 / np.cumsum(E, axis=2)
    A_bar = np.matmul(inv_z.transpose(0, 2, 1), E) * (tril.astype(E.dtype) / E.dtype.type(r))
    out = np.matmul(A_bar, X.data)

    def backward(g):
        dX = np.matmul(A_bar.transpose(0, 2, 1), g)
        D = np.matmul(g, X.data.transpose(0, 2, 1)) * tril
        direct = E / r * np.matmul(inv_z, D)
        s = np.matmul(E, D.transpose(0, 2, 1)) * inv_z / r
        tail = np.flip(np.cumsum(np.flip(s * inv_z, axis=2), axis=2), axis=2)
        return direct - E * tail, dX

    return _make(out, (logits, X), backward, "causal_hop_mean")


# -- fused recurrence ---------------------------------------------------------

def lstm_sequence(gates_x, w_h) -> Tensor:
    """Unroll an LSTM from zero state over pre-computed input projections.

    ``gates_x`` is ``[B, T, 4h]`` holding ``x_t W_x + b`` in gate order
    (input, forget, output, candidate); ``w_h`` is ``[h, 4h]``.  Returns all
    hidden states ``[B, T, h]``.  Forward and backward run in the compiled
    kernel when available.
    """
    gates_x, w_h = _as_tensor(gates_x), _as_tensor(w_h)
    if gates_x.ndim != 3 or w_h.ndim != 2 or w_h.shape[1] != 4 * w_h.shape[0] or gates_x.shape[2] != w_h.shape[1]:
        raise ShapeError(f"lstm_sequence: gates {gates_x.shape} vs recurrent weights {w_h.shape}")
    if gates_x.shape[1] < 1:
        raise ShapeError("lstm_sequence: empty sequence")
    if gates_x.data.dtype != w_h.data.dtype:
        raise ShapeError("lstm_sequence: mixed precision operands")
    hs, cache = kernels.lstm_forward(gates_x.data, w_h.data)

    def backward(g):
        return kernels.lstm_backward(np.ascontiguousarray(g), hs, cache, w_h.data)

    return _make(hs, (gates_x, w_h), backward, "lstm_sequence")


# -- backward -----------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from scalar ``root``; returns ``{tensor: gradient}``.

    Gradients are accumulated into ``.grad`` of every reachable tensor that
    requires grad, summing over all uses of shared nodes.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _topo_order(root)
    # interior gradients live here, leaves accumulate into .grad
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        result[node] = node.grad
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    return result


def grad(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``root`` with respect to ``wrt`` (zeros if unreached)."""
    wrt = list(wrt)
    for t in wrt:
        t.grad = None
    backward(root)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]
