"""Layer-wise Z-score filtering of gradients.

Each tensor is standardized with its own mean and population standard
deviation. A binary mask then keeps the components whose absolute Z-score is
strictly above the ``qp`` nearest-rank percentile, and the mask is applied to
the original (unnormalized) gradient.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .core import NO_THRESHOLD, GradientSet, TensorSet, norm2, percentile_threshold

DEFAULT_SIGMA_EPS = 1e-12


class Scope(str, enum.Enum):
    GLOBAL = "global"
    PER_LAYER = "per-layer"


@dataclass(frozen=True)
class FilterConfig:
    qp: float = 0.95
    scope: Scope = Scope.GLOBAL
    sigma_eps: float = DEFAULT_SIGMA_EPS

    def __post_init__(self):
        if not 0.0 <= self.qp < 1.0:
            raise ValueError(f"filter.qp must lie in [0, 1), got {self.qp}")
        if not self.sigma_eps > 0.0:
            raise ValueError("sigma_eps must be positive")
        object.__setattr__(self, "scope", Scope(self.scope))


@dataclass(frozen=True)
class LayerStats:
    mu: float
    sigma: float
    degenerate: bool


@dataclass(frozen=True)
class ZStats:
    ids: tuple[str, ...]
    layers: tuple[LayerStats, ...]

    def __getitem__(self, name: str) -> LayerStats:
        return self.layers[self.ids.index(name)]


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary mask over the flattened gradient (canonical tensor order)."""

    bits: np.ndarray
    kept_count: int = field(init=False)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool).reshape(-1)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "kept_count", int(np.count_nonzero(bits)))

    @property
    def size(self) -> int:
        return int(self.bits.size)

    @property
    def kept_fraction(self) -> float:
        return self.kept_count / self.size if self.size else 0.0


@dataclass(frozen=True, eq=False)
class FilterOutcome:
    stats: ZStats
    threshold: float | tuple[float, ...]  # one value, or one per layer for PerLayer scope
    mask: Mask
    filtered: GradientSet
    filtered_norm: float


def layer_stats(g: GradientSet, sigma_eps: float = DEFAULT_SIGMA_EPS) -> ZStats:
    """Two-pass mean and population std of every tensor in ``g``."""
    out = []
    for name, layer in zip(g.ids, g.layers()):
        if layer.size == 0:
            raise ValueError(f"empty layer {name!r}")
        mu = float(np.sum(layer) / layer.size)
        centered = layer - mu
        sigma = float(np.sqrt(np.dot(centered, centered) / layer.size))
        out.append(LayerStats(mu, sigma, sigma < sigma_eps))
    return ZStats(g.ids, tuple(out))


def znormalize(g: GradientSet, stats: ZStats) -> GradientSet:
    """Z-scores per layer; degenerate layers become all zeros."""
    if stats.ids != g.ids:
        raise ValueError("shape mismatch between gradient and stats")
    out = []
    for t, st in zip(g.tensors, stats.layers):
        if st.degenerate:
            out.append(np.zeros_like(t))
        else:
            out.append((t - st.mu) / st.sigma)
    return TensorSet(g.ids, tuple(out))


def build_mask(omega: GradientSet, cfg: FilterConfig) -> tuple[Mask, float | tuple[float, ...]]:
    """Threshold ``|omega|`` and keep strictly larger entries.

    Global scope pools all ``d`` absolute scores under one threshold;
    PerLayer computes and applies a threshold inside each tensor.
    """
    if cfg.qp == 0.0:
        bits = np.ones(omega.total_dim, dtype=bool)
        if cfg.scope is Scope.GLOBAL:
            return Mask(bits), NO_THRESHOLD
        return Mask(bits), tuple(NO_THRESHOLD for _ in omega.ids)

    if cfg.scope is Scope.GLOBAL:
        scores = np.abs(omega.flatten())
        threshold = percentile_threshold(scores, cfg.qp)
        return Mask(scores > threshold), threshold

    parts, thresholds = [], []
    for layer in omega.layers():
        scores = np.abs(layer)
        q = percentile_threshold(scores, cfg.qp)
        thresholds.append(q)
        parts.append(scores > q)
    return Mask(np.concatenate(parts)), tuple(thresholds)


def apply_mask(g: GradientSet, mask: Mask) -> GradientSet:
    """Zero the unselected entries of ``g``; kept entries are copied bit-for-bit."""
    if mask.size != g.total_dim:
        raise ValueError("mask length does not match gradient dimension")
    flat = g.flatten()
    return g.unflatten(np.where(mask.bits, flat, 0.0))


def filter_gradient(g: GradientSet, cfg: FilterConfig) -> FilterOutcome:
    stats = layer_stats(g, cfg.sigma_eps)
    omega = znormalize(g, stats)
    mask, threshold = build_mask(omega, cfg)
    filtered = apply_mask(g, mask)
    return FilterOutcome(stats, threshold, mask, filtered, norm2(filtered.flatten()))
