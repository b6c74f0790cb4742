"""Saliency quality metrics and the feature-drop evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    wjac: float
    euc: float
    accuracy: float
    bucket_mass: np.ndarray | None = None
    n_correct: int = 0


def euclidean_distance(ref: np.ndarray, R: np.ndarray) -> float:
    """Mask-normalised distance ``sum sqrt((ref - R)^2) / sum ref``.

    The per-cell square root of a square is an absolute value, so this is an
    L1 distance divided by the mask mass.
    """
    ref = np.asarray(ref, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if ref.shape != R.shape:
        raise MetricError(f"shape mismatch {ref.shape} vs {R.shape}")
    total = ref.sum()
    if total <= 0:
        raise MetricError("reference mask is empty; distance undefined")
    return float(np.sqrt((ref - R) ** 2).sum() / total)


def weighted_jaccard(x_abs: np.ndarray, R: np.ndarray) -> float:
    """``sum min(|x|, R) / sum max(|x|, R)``; two all-zero inputs count as identical (1.0)."""
    a = np.asarray(x_abs, dtype=np.float64)
    b = np.asarray(R, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if (a < 0).any() or (b < 0).any():
        raise MetricError("weighted Jaccard needs nonnegative inputs")
    denom = np.maximum(a, b).sum()
    if denom == 0:
        return 1.0
    return float(np.minimum(a, b).sum() / denom)


def bucket_edges(t_len: int, n_buckets: int) -> np.ndarray:
    """Contiguous bucket boundaries; the last bucket absorbs any remainder."""
    if not 1 <= n_buckets <= t_len:
        raise MetricError(f"cannot split {t_len} steps into {n_buckets} buckets")
    size = t_len // n_buckets
    edges = np.arange(n_buckets + 1) * size
    edges[-1] = t_len
    return edges


def bucket_mass(R: np.ndarray, n_buckets: int) -> tuple[np.ndarray, bool]:
    """Fraction of total saliency in each time bucket.

    Returns ``(mass, degenerate)``; an all-zero map gives the uniform vector with
    ``degenerate=True``.
    """
    R = np.asarray(R, dtype=np.float64)
    edges = bucket_edges(R.shape[0], n_buckets)
    per_step = R.reshape(R.shape[0], -1).sum(axis=1)
    total = per_step.sum()
    if total == 0:
        return np.full(n_buckets, 1.0 / n_buckets), True
    sums = np.array([per_step[lo:hi].sum() for lo, hi in zip(edges[:-1], edges[1:])])
    return sums / total, False


def window_mass(R: np.ndarray, start: int, end: int) -> float:
    """Fraction of total saliency falling in timesteps ``[start, end)``."""
    R = np.asarray(R, dtype=np.float64)
    total = R.sum()
    return float(R[start:end].sum() / total) if total > 0 else 0.0


def accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    return float((np.argmax(scores, axis=1) == np.asarray(labels)).mean())


def top_cells(R: np.ndarray, count: int) -> np.ndarray:
    """Flat indices of the ``count`` largest cells; ties go to the earlier ``(t, i)``."""
    return np.argsort(-R.ravel(), kind="stable")[:count]


def drop_count(p: float, n_cells: int) -> int:
    return int(np.floor(p / 100.0 * n_cells + 1e-9))


def drop_top_cells(X: np.ndarray, R: np.ndarray, p: float) -> np.ndarray:
    """Copy of ``X`` with the top-``p``% cells of each sample's map set to 0."""
    out = np.array(X, dtype=np.float64, copy=True)
    n_cells = X.shape[1] * X.shape[2]
    k = drop_count(p, n_cells)
    if k == 0:
        return out
    flat = out.reshape(len(out), -1)
    for b in range(len(out)):
        flat[b, top_cells(R[b], k)] = 0.0
    return out


def feature_drop_eval(model, X: np.ndarray, y: np.ndarray, saliency: np.ndarray,
                      percents: Sequence[float]) -> list[tuple[float, float]]:
    """Accuracy after zeroing each sample's top-p% salient cells, for each p.

    ``saliency`` may come from a different model (cross condition) or be
    random (baseline).  The first entry is ``(0.0, unmodified accuracy)``.
    """
    percents = list(percents)
    if not percents:
        raise MetricError("percent grid is empty")
    if any(not 0 < p <= 100 for p in percents):
        raise MetricError("percents must lie in (0, 100]")
    if saliency.shape != X.shape:
        raise MetricError(f"saliency {saliency.shape} does not match inputs {X.shape}")
    curve = [(0.0, accuracy(model.predict(X), y))]
    for p in percents:
        curve.append((float(p), accuracy(model.predict(drop_top_cells(X, saliency, p)), y)))
    return curve


def random_saliency(shape, seed: int) -> np.ndarray:
    return np.random.Generator(np.random.PCG64(seed)).random(shape)


def evaluate_maps(X: np.ndarray, masks: np.ndarray, maps: np.ndarray) -> tuple[float, float]:
    """Mean weighted Jaccard (against ``|X|``) and mean Euclidean distance (against the mask)."""
    if len(maps) == 0:
        return float("nan"), float("nan")
    wj = [weighted_jaccard(np.abs(x), r) for x, r in zip(X, maps)]
    eu = [euclidean_distance(m.astype(np.float64), r) for m, r in zip(masks, maps)]
    return float(np.mean(wj)), float(np.mean(eu))


REPORT_COLUMNS = ("dataset", "model", "seed", "wjac", "euc", "acc")


def write_report(rows, path, columns: Sequence[str] = REPORT_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)
