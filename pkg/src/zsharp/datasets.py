"""Desk-scale datasets: synthetic 2-D generators, an IDX reader/writer,
seeded splits and per-epoch minibatching.

CSV export: a header ``x0,x1,...,label`` then one sample per line, label in
the last column, features written with shortest round-trip repr.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .core import SeededRng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2:
            raise ValueError("features must be an n x m matrix")
        if x.shape[0] != y.shape[0]:
            raise ValueError("features and labels differ in length")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite feature value")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    shuffle_seed: int = 0
    drop_last: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# stream ids keep the generators' draws independent of one another
_STREAM_NOISE, _STREAM_FLIP, _STREAM_SPLIT, _STREAM_ORDER = 1, 2, 3, 4
_EPOCH_STREAM_BASE = 1 << 32


def flip_labels(labels: np.ndarray, n_classes: int, fraction: float, rng: SeededRng) -> np.ndarray:
    """Reassign ``round(fraction * n)`` labels to a different class."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("label noise fraction must lie in [0, 1]")
    y = np.array(labels, dtype=np.int64)
    k = int(round(fraction * y.size))
    if k == 0 or n_classes < 2:
        return y
    idx = rng.permutation(y.size)[:k]
    shift = rng.integers(1, n_classes, k)
    y[idx] = (y[idx] + shift) % n_classes
    return y


def _finish(x, y, n_classes, label_noise, rng) -> Dataset:
    if label_noise:
        y = flip_labels(y, n_classes, label_noise, rng.fork(_STREAM_FLIP))
    return Dataset(x, y, n_classes)


def gen_two_moons(n: int, noise: float = 0.1, seed: int = 0, label_noise: float = 0.0) -> Dataset:
    """Two interleaved half circles.

    Class 0 lies on the upper unit half circle, class 1 on the lower half
    circle centred at (1, 0.5). Angles are evenly spaced; Gaussian noise of
    std ``noise`` is added to both coordinates.
    """
    if n < 2:
        raise ValueError("two-moons needs n >= 2")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    n0 = n // 2
    n1 = n - n0
    t0 = np.linspace(0.0, math.pi, n0)
    t1 = np.linspace(0.0, math.pi, n1)
    x = np.concatenate([
        np.stack([np.cos(t0), np.sin(t0)], axis=1),
        np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1),
    ])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    rng = SeededRng(seed)
    if noise > 0:
        x = x + rng.fork(_STREAM_NOISE).normal(x.size, std=noise).reshape(x.shape)
    return _finish(x, y, 2, label_noise, rng)


def gen_blobs(n: int, n_classes: int = 3, noise: float = 0.5, seed: int = 0, label_noise: float = 0.0) -> Dataset:
    """Isotropic Gaussian blobs with centres evenly spaced on a radius-2 circle."""
    if n < n_classes or n_classes < 2:
        raise ValueError("blobs needs n_classes >= 2 and n >= n_classes")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    y = np.arange(n, dtype=np.int64) % n_classes
    angles = 2.0 * math.pi * np.arange(n_classes) / n_classes
    centres = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    rng = SeededRng(seed)
    x = centres[y] + rng.fork(_STREAM_NOISE).normal(2 * n, std=noise).reshape(n, 2)
    return _finish(x, y, n_classes, label_noise, rng)


def gen_spirals(n: int, n_classes: int = 2, noise: float = 0.1, seed: int = 0, label_noise: float = 0.0) -> Dataset:
    """Interleaved Archimedean spirals, one arm per class."""
    if n < n_classes or n_classes < 2:
        raise ValueError("spirals needs n_classes >= 2 and n >= n_classes")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    y = np.arange(n, dtype=np.int64) % n_classes
    pos = (np.arange(n) // n_classes) / max(1, math.ceil(n / n_classes) - 1)
    radius = 0.1 + pos
    theta = 3.0 * math.pi * pos + 2.0 * math.pi * y / n_classes
    x = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    rng = SeededRng(seed)
    if noise > 0:
        x = x + rng.fork(_STREAM_NOISE).normal(x.size, std=noise).reshape(x.shape)
    return _finish(x, y, n_classes, label_noise, rng)


GENERATORS = {"two-moons": gen_two_moons, "blobs": gen_blobs, "spirals": gen_spirals}


def split(ds: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first ``n - ceil(f * n)`` rows train, the rest test."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    n = len(ds)
    n_test = math.ceil(test_fraction * n - 1e-9)
    # keep both sides non-empty whenever n >= 2
    n_test = min(max(n_test, 1), n - 1) if n >= 2 else n_test
    perm = SeededRng(seed, _STREAM_SPLIT).permutation(n)
    return ds.subset(perm[: n - n_test]), ds.subset(perm[n - n_test:])


def epoch_order(n: int, plan: BatchPlan, epoch: int) -> np.ndarray:
    """Sample order for one epoch: a pure function of ``(shuffle_seed, epoch)``."""
    return SeededRng(plan.shuffle_seed, _EPOCH_STREAM_BASE + epoch).permutation(n)


def minibatch_indices(n: int, plan: BatchPlan, epoch: int) -> list[np.ndarray]:
    order = epoch_order(n, plan, epoch)
    out = []
    for start in range(0, n, plan.batch_size):
        chunk = order[start:start + plan.batch_size]
        if plan.drop_last and chunk.size < plan.batch_size:
            break
        out.append(chunk)
    return out


def minibatches(ds: Dataset, plan: BatchPlan, epoch: int) -> Iterator[Dataset]:
    for idx in minibatch_indices(len(ds), plan, epoch):
        yield ds.subset(idx)


# -- IDX -------------------------------------------------------------------


def _read_idx(data: bytes, expected_magic: int, name: str) -> tuple[tuple[int, ...], np.ndarray]:
    if len(data) < 4:
        raise IdxFormatError(f"{name}: unexpected EOF")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{name}: not an IDX file (magic {magic:#010x}, expected {expected_magic:#010x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{name}: unexpected EOF")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = math.prod(dims)
    if len(data) < header + count:
        raise IdxFormatError(f"{name}: unexpected EOF")
    body = np.frombuffer(data, dtype=np.uint8, count=count, offset=header)
    return dims, body.reshape(dims)


def parse_idx_pair(images: bytes, labels: bytes, n_classes: int | None = None) -> Dataset:
    dims, pix = _read_idx(images, IDX_IMAGES_MAGIC, "images")
    (n_lab,), lab = _read_idx(labels, IDX_LABELS_MAGIC, "labels")
    if dims[0] != n_lab:
        raise IdxFormatError(f"image/label count mismatch ({dims[0]} images, {n_lab} labels)")
    x = pix.reshape(dims[0], -1).astype(np.float64) / 255.0
    y = lab.astype(np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1 if y.size else 1
    return Dataset(x, y, n_classes)


def load_idx_pair(images_path: str | Path, labels_path: str | Path, n_classes: int | None = None) -> Dataset:
    """Read an (images, labels) IDX pair; pixels scale to [0, 1]."""
    return parse_idx_pair(Path(images_path).read_bytes(), Path(labels_path).read_bytes(), n_classes)


def encode_idx_images(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be count x rows x cols")
    return struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
    return struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes()


# -- CSV -------------------------------------------------------------------


def to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{i}" for i in range(ds.n_features)] + ["label"])
    for row, label in zip(ds.features, ds.labels):
        w.writerow([repr(float(v)) for v in row] + [int(label)])
    return buf.getvalue()


def write_csv(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(to_csv(ds), encoding="utf-8")


def read_csv(path: str | Path, n_classes: int | None = None) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][-1] != "label":
        raise ValueError("dataset CSV must have a header ending in 'label'")
    body = rows[1:]
    x = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64).reshape(len(body), len(rows[0]) - 1)
    y = np.array([int(r[-1]) for r in body], dtype=np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1 if y.size else 1
    return Dataset(x, y, n_classes)
