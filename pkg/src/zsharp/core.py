"""Flat-vector arithmetic, the layered tensor container, seeded randomness and
the nearest-rank percentile used by the gradient filter.

Everything is float64. Layered containers keep each parameter tensor in its
natural shape; the canonical flattening is row-major per tensor, tensors in
declaration order.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

NO_THRESHOLD = -math.inf  # percentile sentinel: every entry is kept


def flatvec(values) -> np.ndarray:
    """Validate external input as a finite 1-D float64 vector (always a copy)."""
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite value in vector input")
    return arr


def norm2(v: np.ndarray) -> float:
    """Euclidean norm. Uses a scaled sum of squares so tiny or huge entries do
    not under/overflow."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 0:
        return 0.0
    scale = float(np.max(np.abs(v)))
    if scale == 0.0:
        return 0.0
    scaled = v / scale
    return scale * math.sqrt(float(np.dot(scaled, scaled)))


def percentile_threshold(values, qp: float) -> float:
    """Nearest-rank percentile of non-negative ``values``.

    Sorts ascending into ``a``; with ``k = floor(qp * n)`` returns ``a[k-1]``,
    or :data:`NO_THRESHOLD` when ``k == 0``. Callers keep entries strictly
    greater than the returned value, so ties at the threshold are dropped.
    """
    a = np.asarray(values, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValueError("empty percentile input")
    if not 0.0 <= qp < 1.0:
        raise ValueError(f"qp must lie in [0, 1), got {qp}")
    k = math.floor(qp * a.size)
    if k == 0:
        return NO_THRESHOLD
    # partition is enough for an order statistic; result equals sorted(a)[k-1]
    return float(np.partition(a, k - 1)[k - 1])


class SeededRng:
    """Deterministic random stream keyed by ``(seed, stream)``.

    Backed by the Philox-4x64 counter-based generator. Only the raw 64-bit
    output words are consumed (their sequence is fixed by the algorithm), and
    all derived draws are computed here:

    * uniforms: top 53 bits of each word, mapped to ``(0, 1]``
    * normals: Box-Muller on pairs of uniforms
    * permutations: stable argsort of one uniform per element
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise ValueError("seed and stream must be non-negative")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self._bitgen = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))

    def fork(self, stream: int) -> "SeededRng":
        """Independent generator sharing this seed."""
        return SeededRng(self.seed, stream)

    def raw(self, size: int) -> np.ndarray:
        return self._bitgen.random_raw(size).astype(np.uint64)

    def uniform(self, size: int) -> np.ndarray:
        words = self.raw(size) >> np.uint64(11)
        return (words.astype(np.float64) + 1.0) * 2.0**-53

    def normal(self, size: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        pairs = (size + 1) // 2
        u = self.uniform(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * math.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return mean + std * z[:size]

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        """Integers in ``[low, high)`` by scaling uniforms (bias < 2**-50)."""
        span = high - low
        if span <= 0:
            raise ValueError("empty integer range")
        idx = np.floor((1.0 - self.uniform(size)) * span).astype(np.int64)
        return low + np.minimum(idx, span - 1)


@dataclass(frozen=True, eq=False)
class TensorSet:
    """Ordered, named float64 tensors: model parameters or their gradients.

    The same container serves as parameter set, gradient set and perturbation;
    layouts must match exactly for any elementwise combination.
    """

    ids: tuple[str, ...]
    tensors: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.tensors):
            raise ValueError("ids and tensors differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate tensor ids")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, np.ndarray]]) -> "TensorSet":
        ids, tensors = [], []
        for name, t in pairs:
            ids.append(name)
            tensors.append(np.array(t, dtype=np.float64))
        return cls(tuple(ids), tuple(tensors))

    def __len__(self) -> int:
        return len(self.tensors)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(zip(self.ids, self.tensors))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[self.ids.index(name)]

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(t.shape for t in self.tensors)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(int(t.size) for t in self.tensors)

    @property
    def total_dim(self) -> int:
        return sum(self.sizes)

    def layers(self) -> list[np.ndarray]:
        """Each tensor as a 1-D view in row-major order."""
        return [t.reshape(-1) for t in self.tensors]

    def flatten(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate(self.layers())

    def unflatten(self, flat: np.ndarray) -> "TensorSet":
        """A new set with this layout and values taken from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64).reshape(-1)
        if flat.size != self.total_dim:
            raise ValueError(f"expected {self.total_dim} values, got {flat.size}")
        out, offset = [], 0
        for t in self.tensors:
            out.append(flat[offset:offset + t.size].reshape(t.shape).copy())
            offset += t.size
        return TensorSet(self.ids, tuple(out))

    def same_layout(self, other: "TensorSet") -> bool:
        return self.ids == other.ids and self.shapes == other.shapes

    def check_layout(self, other: "TensorSet") -> None:
        if not self.same_layout(other):
            raise ValueError(
                f"shape mismatch: {list(zip(self.ids, self.shapes))} vs "
                f"{list(zip(other.ids, other.shapes))}"
            )

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "TensorSet":
        return TensorSet(self.ids, tuple(np.asarray(fn(t), dtype=np.float64) for t in self.tensors))

    def zip_map(self, other: "TensorSet", fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "TensorSet":
        self.check_layout(other)
        return TensorSet(
            self.ids,
            tuple(np.asarray(fn(a, b), dtype=np.float64) for a, b in zip(self.tensors, other.tensors)),
        )

    def __add__(self, other: "TensorSet") -> "TensorSet":
        return self.zip_map(other, np.add)

    def __sub__(self, other: "TensorSet") -> "TensorSet":
        return self.zip_map(other, np.subtract)

    def scale(self, a: float) -> "TensorSet":
        return self.map(lambda t: t * a)

    def zeros_like(self) -> "TensorSet":
        return self.map(np.zeros_like)

    def copy(self) -> "TensorSet":
        return self.map(np.copy)

    def norm2(self) -> float:
        return norm2(self.flatten())

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(t))) for t in self.tensors)

    def bitwise_equal(self, other: "TensorSet") -> bool:
        if not self.same_layout(other):
            return False
        return all(a.tobytes() == b.tobytes() for a, b in zip(self.tensors, other.tensors))

    def digest(self) -> str:
        """SHA-256 over ids, shapes and raw little-endian float64 bytes."""
        h = hashlib.sha256()
        for name, t in self:
            h.update(name.encode())
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
        return h.hexdigest()


# Parameters, gradients and perturbations share one container.
ParamSet = TensorSet
GradientSet = TensorSet


def single_layer(values: Sequence[float] | np.ndarray, name: str = "w") -> TensorSet:
    """Wrap one flat vector as a one-tensor set (analytic test problems)."""
    return TensorSet((name,), (flatvec(values),))
