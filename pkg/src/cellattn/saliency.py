"""Gradient saliency maps and the per-timestep gradient decay diagnostic.

A saliency map is ``|dS_c / dX|`` for a raw class score ``S_c``.  Maps for a
batch are computed with a single backward pass: samples never interact in
the forward graph, so the gradient of ``sum_b S_{c_b}(X_b)`` w.r.t. ``X_b`` is
exactly sample ``b``'s own map.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cells import CellState, LstmParams, lstm_step_gates


class SaliencyError(FloatingPointError):
    pass


@dataclass
class SaliencyMap:
    values: np.ndarray
    target: int
    sample_id: int | str | None = None

    @property
    def shape(self):
        return self.values.shape


@dataclass
class DecayProfile:
    g: np.ndarray

    def half_ratio(self) -> float:
        """Mean over the first half of the sequence divided by mean over the second half."""
        half = len(self.g) // 2
        return float(self.g[:half].mean() / self.g[half:].mean())


def input_gradients(model, X: np.ndarray, targets, batch_size: int = 64) -> np.ndarray:
    """Signed ``dS_{target_b} / dX_b`` for a batch ``[B, T, N]``."""
    X = np.asarray(X)
    targets = np.asarray(targets, dtype=np.intp)
    if X.ndim != 3 or targets.shape != (len(X),):
        raise ValueError(f"need [B, T, N] inputs and one target per sample, got {X.shape} / {targets.shape}")
    n_classes = model.spec.n_classes if hasattr(model, "spec") else None
    if n_classes is not None and ((targets < 0) | (targets >= n_classes)).any():
        raise ValueError(f"target class outside [0, {n_classes})")
    out = np.empty(X.shape, dtype=np.float64)
    for lo in range(0, len(X), batch_size):
        xb = ad.tensor(X[lo:lo + batch_size], requires_grad=True)
        root = ad.sum_all(ad.pick(model.scores(xb), targets[lo:lo + batch_size]))
        with np.errstate(over="ignore", invalid="ignore"):  # checked below, per cell
            ad.backward(root)
        g = xb.grad if xb.grad is not None else np.zeros_like(xb.data)
        bad = ~np.isfinite(g)
        if bad.any():
            b, t, _ = np.argwhere(bad)[0]
            raise SaliencyError(f"non-finite gradient for sample {lo + b} at timestep {t}")
        out[lo:lo + len(xb.data)] = g
    return out


def saliency_map(model, X: np.ndarray, c: int, sample_id=None) -> SaliencyMap:
    grads = input_gradients(model, np.asarray(X)[None], [c])
    return SaliencyMap(np.abs(grads[0]), int(c), sample_id)


def saliency_maps(model, X: np.ndarray, targets, batch_size: int = 64) -> np.ndarray:
    return np.abs(input_gradients(model, X, targets, batch_size))


def decay_profile(model, X: np.ndarray, c: int) -> DecayProfile:
    grads = input_gradients(model, np.asarray(X)[None], [c])[0]
    return DecayProfile(np.sqrt((grads ** 2).sum(axis=1)))


def decay_profiles(model, X: np.ndarray, targets, batch_size: int = 64) -> np.ndarray:
    """Per-sample ``g_t`` rows ``[B, T]``."""
    grads = input_gradients(model, X, targets, batch_size)
    return np.sqrt((grads ** 2).sum(axis=2))


# -- recurrent Jacobian -----------------------------------------------------------

def recurrent_jacobian_terms(params: LstmParams, x, prev: CellState) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form factors of one LSTM step's Jacobian, ``J[j, k] = d h_t[j] / d (.)_{t-1}[k]``.

    Returns ``(through_h, through_c)``: the derivative w.r.t. the previous hidden
    state (output, forget, input and candidate gate paths) and w.r.t. the
    previous cell state, which is the diagonal ``o * (1 - tanh(c)^2) * f``.
    Their sum is the usual single-expression expansion of dh_t/dh_{t-1}.
    """
    state, gates = lstm_step_gates(params, x, prev)
    i, f, o, g = (gates[k].data for k in "ifoc")
    tc = np.tanh(state.c.data)
    c_prev = prev.c.data
    W = {k: getattr(params, f"W_h{k}").data for k in "ifoc"}
    dh_dc = o * (1.0 - tc ** 2)
    through_o = tc[:, None] * (W["o"] * (o * (1.0 - o))).T
    through_cell = (
        c_prev[:, None] * (W["f"] * (f * (1.0 - f))).T
        + g[:, None] * (W["i"] * (i * (1.0 - i))).T
        + i[:, None] * (W["c"] * (1.0 - g * g)).T
    )
    through_h = through_o + dh_dc[:, None] * through_cell
    through_c = np.diag(dh_dc * f)
    return through_h, through_c


def autodiff_step_jacobians(params: LstmParams, x, prev: CellState) -> tuple[np.ndarray, np.ndarray]:
    """``(d h_t / d h_{t-1}, d h_t / d c_{t-1})`` by reverse mode, one row per output unit."""
    h_prev = ad.tensor(prev.h.data, requires_grad=True)
    c_prev = ad.tensor(prev.c.data, requires_grad=True)
    state, _ = lstm_step_gates(params, ad.tensor(np.asarray(getattr(x, "data", x))), CellState(h_prev, c_prev))
    n = h_prev.shape[0]
    jh = np.empty((n, n))
    jc = np.empty((n, n))
    for j in range(n):
        jh[j], jc[j] = ad.grad(ad.getitem(state.h, j), [h_prev, c_prev])
    return jh, jc


# -- export ------------------------------------------------------------------

def normalize_for_display(values: np.ndarray) -> tuple[np.ndarray, float]:
    """Divide by the map maximum; returns the scaled map and the divisor."""
    peak = float(values.max()) if values.size else 0.0
    return (values / peak if peak > 0 else np.zeros_like(values)), peak


def write_csv(values: np.ndarray, path) -> None:
    np.savetxt(path, values, fmt="%.9g", delimiter=",")


def write_pgm(values: np.ndarray, path) -> float:
    """8-bit binary PGM of the max-normalised map (time down the rows); returns the divisor."""
    scaled, peak = normalize_for_display(values)
    pixels = np.round(scaled * 255).astype(np.uint8)
    rows, cols = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode())
        fh.write(pixels.tobytes())
    return peak


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows = int(fields[1]), int(fields[2])
    return np.frombuffer(blob, dtype=np.uint8, count=rows * cols, offset=pos + 1).reshape(rows, cols)
