"""Synthetic box datasets, MNIST-as-sequence adapter, and the ICTS file format.

Randomness: every sample draws from its own ``numpy.random.PCG64`` stream
seeded by ``SeedSequence(seed, spawn_key=(split, index))``, so a sample's
content depends only on ``(seed, split, index)`` and never on generation
order.  Values are rounded to float32 so ICTS files round-trip exactly.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

T_DEFAULT = 100
N_DEFAULT = 100
SINGLE_BAND = (10, 40)
THREE_BANDS = ((10, 20), (45, 55), (80, 90))
REGIONS = {"earlier": (0, 30), "middle": (30, 70), "latter": (70, 100)}
MOVING_STARTS = (0, 20, 40, 60, 80)
MNIST_DIGITS = (1, 6, 7)
MOVING_WIDTH = 20
MIXED_WIDTH = 30
SPLITS = {"train": 0, "test": 1}
KINDS = ("earlier", "middle", "latter", "mixed", "three-earlier", "three-middle", "three-latter", "moving")


class DataFormatError(ValueError):
    """A dataset or IDX file is malformed."""


@dataclass(frozen=True)
class BoxSpec:
    time_start: int
    time_end: int
    feature_start: int
    feature_end: int
    amplitude: float = 1.0

    def validate(self, t_len: int, n_features: int) -> None:
        if not (0 <= self.time_start < self.time_end <= t_len):
            raise ValueError(f"box time range [{self.time_start}, {self.time_end}) outside [0, {t_len})")
        if not (0 <= self.feature_start < self.feature_end <= n_features):
            raise ValueError(f"box feature range [{self.feature_start}, {self.feature_end}) outside [0, {n_features})")


@dataclass
class TimeSeriesSample:
    x: np.ndarray
    label: int
    mask: np.ndarray | None = None


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    masks: np.ndarray | None = None
    split: str = "train"
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.X.ndim != 3 or self.y.shape != (len(self.X),):
            raise ValueError(f"inconsistent dataset arrays {self.X.shape} / {self.y.shape}")
        if self.masks is not None and self.masks.shape != self.X.shape:
            raise ValueError("mask shape must match samples")

    def __len__(self) -> int:
        return len(self.X)

    def __iter__(self) -> Iterator[TimeSeriesSample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> TimeSeriesSample:
        mask = None if self.masks is None else self.masks[i]
        return TimeSeriesSample(self.X[i], int(self.y[i]), mask)

    @property
    def T(self) -> int:
        return self.X.shape[1]

    @property
    def N(self) -> int:
        return self.X.shape[2]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        masks = None if self.masks is None else self.masks[idx]
        return LabeledDataset(self.X[idx], self.y[idx], self.n_classes, masks, self.split, self.name, dict(self.meta))


# -- box datasets ------------------------------------------------------------

def parse_kind(kind: str) -> tuple[str, int | None]:
    """``"moving(40)"`` -> ``("moving", 40)``; plain kinds -> ``(kind, None)``."""
    m = re.fullmatch(r"moving\((\d+)\)", kind)
    if m:
        return "moving", int(m.group(1))
    if kind not in KINDS or kind == "moving":
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS[:-1]} or moving(start)")
    return kind, None


def _stagger(lo: int, hi: int, parts: int) -> list[tuple[int, int]]:
    edges = np.linspace(lo, hi, parts + 1).round().astype(int)
    return list(zip(edges[:-1].tolist(), edges[1:].tolist()))


def box_layout(kind: str, t_len: int = T_DEFAULT, n_features: int = N_DEFAULT,
               amplitude: float = 1.0) -> list[BoxSpec]:
    """Fixed boxes for a dataset kind (empty for ``mixed``, which is per-sample).

    Region boundaries scale with ``t_len`` (fractions 0.3 / 0.7 of the series).
    """
    base, parsed_start = parse_kind(kind)
    scale_t = t_len / T_DEFAULT
    if base == "moving":
        lo = int(parsed_start)
        boxes = [BoxSpec(lo, lo + MOVING_WIDTH, *SINGLE_BAND, amplitude)]
    elif base in REGIONS:
        lo, hi = (round(v * scale_t) for v in REGIONS[base])
        boxes = [BoxSpec(lo, hi, *SINGLE_BAND, amplitude)]
    elif base.startswith("three-"):
        lo, hi = (round(v * scale_t) for v in REGIONS[base[6:]])
        boxes = [BoxSpec(a, b, f0, f1, amplitude) for (a, b), (f0, f1) in zip(_stagger(lo, hi, 3), THREE_BANDS)]
    else:
        boxes = []
    for b in boxes:
        b.validate(t_len, n_features)
    return boxes


def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(SPLITS[split], index))))


def generate_box_dataset(kind: str, n_samples: int, seed: int, split: str = "train",
                         t_len: int = T_DEFAULT, n_features: int = N_DEFAULT,
                         amplitude: float = 1.0) -> LabeledDataset:
    """Gaussian-noise sequences with a +amplitude (label 1) / -amplitude (label 0) box.

    Labels alternate by index, so classes are balanced to within one sample.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {tuple(SPLITS)}")
    base, _ = parse_kind(kind)
    boxes = box_layout(kind, t_len, n_features, amplitude)
    X = np.empty((n_samples, t_len, n_features), dtype=np.float64)
    masks = np.zeros((n_samples, t_len, n_features), dtype=bool)
    y = np.arange(n_samples) % 2
    for i in range(n_samples):
        rng = sample_rng(seed, split, i)
        x = rng.standard_normal((t_len, n_features))
        sample_boxes = boxes
        if base == "mixed":
            width = min(round(MIXED_WIDTH * t_len / T_DEFAULT), t_len)
            lo = int(rng.integers(0, t_len - width + 1))
            sample_boxes = [BoxSpec(lo, lo + width, *SINGLE_BAND, amplitude)]
            sample_boxes[0].validate(t_len, n_features)
        sign = 1.0 if y[i] == 1 else -1.0
        for b in sample_boxes:
            x[b.time_start:b.time_end, b.feature_start:b.feature_end] += sign * b.amplitude
            masks[i, b.time_start:b.time_end, b.feature_start:b.feature_end] = True
        X[i] = x
    X = X.astype(np.float32).astype(np.float64)
    meta = {"kind": kind, "seed": seed, "amplitude": amplitude}
    return LabeledDataset(X, y, 2, masks, split, kind, meta)


def make_splits(kind: str, seed: int, n_train: int = 1000, n_test: int = 300, **kw) -> tuple[LabeledDataset, LabeledDataset]:
    return (generate_box_dataset(kind, n_train, seed, "train", **kw),
            generate_box_dataset(kind, n_test, seed, "test", **kw))


# -- MNIST IDX ------------------------------------------------------------------

def _read_idx(path, expected_dims: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise DataFormatError(f"{path}: truncated header at byte {len(blob)}")
    if blob[0] != 0 or blob[1] != 0 or blob[2] != 0x08:
        raise DataFormatError(f"{path}: bad magic number {blob[:4].hex()} at byte 0")
    ndim = blob[3]
    if ndim != expected_dims:
        raise DataFormatError(f"{path}: expected {expected_dims} dimensions, header says {ndim} (byte 3)")
    header_end = 4 + 4 * ndim
    if len(blob) < header_end:
        raise DataFormatError(f"{path}: truncated dimension fields at byte {len(blob)}")
    dims = struct.unpack(f">{ndim}I", blob[4:header_end])
    count = int(np.prod(dims))
    if len(blob) < header_end + count:
        raise DataFormatError(f"{path}: truncated data at byte {len(blob)}, need {header_end + count}")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    images = _read_idx(path, 3)
    if images.shape[1:] != (28, 28):
        raise DataFormatError(f"{path}: images are {images.shape[1:]}, expected 28x28 (bytes 8-15)")
    return images


def read_idx_labels(path) -> np.ndarray:
    return _read_idx(path, 1)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_mnist_timeseries(image_path, label_path, digits: Sequence[int] = MNIST_DIGITS,
                          split: str = "train") -> LabeledDataset:
    """Image rows become timesteps; pixels scaled to [0, 1]; labels remapped to 0..len(digits)-1."""
    images = read_idx_images(image_path)
    labels = read_idx_labels(label_path)
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    digits = list(digits)
    keep = np.isin(labels, digits)
    missing = [d for d in digits if not (labels == d).any()]
    if missing:
        raise DataFormatError(f"{label_path}: no samples of digit(s) {missing}")
    remap = {d: i for i, d in enumerate(digits)}
    X = images[keep].astype(np.float64) / 255.0
    y = np.array([remap[int(v)] for v in labels[keep]], dtype=np.int64)
    return LabeledDataset(X, y, len(digits), None, split, "mnist", {"digits": digits})


# -- ICTS files ---------------------------------------------------------------------

ICTS_MAGIC = b"ICTS"
ICTS_VERSION = 1


def dataset_bytes(ds: LabeledDataset) -> bytes:
    """ICTS layout: ``magic | u16 version | u32 n, T, N, n_classes, has_masks |``
    per sample ``u16 label | T*N float32 | packed mask bits (if present)``, all little-endian."""
    n, t_len, n_feat = ds.X.shape
    has_masks = ds.masks is not None
    parts = [ICTS_MAGIC, struct.pack("<H5I", ICTS_VERSION, n, t_len, n_feat, ds.n_classes, int(has_masks))]
    values = ds.X.astype("<f4")
    for i in range(n):
        parts.append(struct.pack("<H", int(ds.y[i])))
        parts.append(values[i].tobytes())
        if has_masks:
            parts.append(np.packbits(ds.masks[i].ravel()).tobytes())
    return b"".join(parts)


def save_dataset(ds: LabeledDataset, path) -> str:
    """Write an ICTS file and return its sha256 hex digest."""
    blob = dataset_bytes(ds)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_dataset(path, split: str = "train") -> LabeledDataset:
    blob = Path(path).read_bytes()
    if blob[:4] != ICTS_MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r} at byte 0")
    if len(blob) < 26:
        raise DataFormatError(f"{path}: truncated header at byte {len(blob)}")
    version, n, t_len, n_feat, n_classes, has_masks = struct.unpack_from("<H5I", blob, 4)
    if version != ICTS_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version} at byte 4")
    cells = t_len * n_feat
    mask_bytes = (cells + 7) // 8 if has_masks else 0
    record = 2 + 4 * cells + mask_bytes
    if len(blob) != 26 + n * record:
        raise DataFormatError(f"{path}: expected {26 + n * record} bytes, found {len(blob)}")
    X = np.empty((n, t_len, n_feat), dtype=np.float64)
    y = np.empty(n, dtype=np.int64)
    masks = np.zeros((n, t_len, n_feat), dtype=bool) if has_masks else None
    offset = 26
    for i in range(n):
        (y[i],) = struct.unpack_from("<H", blob, offset)
        if y[i] >= n_classes:
            raise DataFormatError(f"{path}: label {y[i]} >= class count {n_classes} at byte {offset}")
        X[i] = np.frombuffer(blob, dtype="<f4", count=cells, offset=offset + 2).reshape(t_len, n_feat)
        if has_masks:
            bits = np.frombuffer(blob, dtype=np.uint8, count=mask_bytes, offset=offset + 2 + 4 * cells)
            masks[i] = np.unpackbits(bits, count=cells).astype(bool).reshape(t_len, n_feat)
        offset += record
    return LabeledDataset(X, y, int(n_classes), masks, split, Path(path).stem)


def content_hash(ds: LabeledDataset) -> str:
    return hashlib.sha256(dataset_bytes(ds)).hexdigest()
