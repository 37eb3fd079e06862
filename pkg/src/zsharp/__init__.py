"""Z-score filtered sharpness-aware minimization (ZSharp)."""

__version__ = "0.1.0"

from .core import NO_THRESHOLD, GradientSet, ParamSet, SeededRng, TensorSet, flatvec, norm2, percentile_threshold
from .zfilter import FilterConfig, FilterOutcome, Mask, Scope, ZStats, build_mask, filter_gradient, layer_stats, znormalize
from .optim import (
    AdamW,
    AscentConfig,
    AscentKind,
    ConstantLr,
    DivergenceError,
    SGD,
    StepDecay,
    adamw_step,
    ascend,
    compute_perturbation,
    lr_at,
    sam_step,
)

__all__ = [
    "NO_THRESHOLD", "GradientSet", "ParamSet", "SeededRng", "TensorSet", "flatvec", "norm2",
    "percentile_threshold", "FilterConfig", "FilterOutcome", "Mask", "Scope", "ZStats", "build_mask",
    "filter_gradient", "layer_stats", "znormalize", "AdamW", "AscentConfig", "AscentKind", "ConstantLr",
    "DivergenceError", "SGD", "StepDecay", "adamw_step", "ascend", "compute_perturbation", "lr_at", "sam_step",
]
