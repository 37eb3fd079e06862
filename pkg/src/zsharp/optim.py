"""Two-phase sharpness-aware updates over AdamW or SGD.

A step evaluates the gradient at ``w``, builds a perturbation ``eps`` (the
full gradient for SAM, the Z-score filtered gradient for ZSharp), evaluates
the gradient at ``w + eps`` on the same batch, restores ``w`` from a snapshot
and hands that second gradient to the base optimizer.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .core import GradientSet, ParamSet, norm2
from .zfilter import FilterConfig, FilterOutcome, filter_gradient

DEFAULT_DELTA = 1e-8


class DivergenceError(RuntimeError):
    """Loss or gradient became non-finite."""

    def __init__(self, step: int, what: str = "loss or gradient"):
        super().__init__(f"numerical divergence at step {step}: non-finite {what}")
        self.step = step
        self.partial = None  # filled in by the training loop


class AscentKind(str, enum.Enum):
    SAM = "sam"
    ZSHARP = "zsharp"


@dataclass(frozen=True)
class AscentConfig:
    rho: float = 0.05
    delta: float = DEFAULT_DELTA
    kind: AscentKind = AscentKind.SAM
    filter: FilterConfig | None = None

    def __post_init__(self):
        if not self.rho > 0.0:
            raise ValueError(f"ascent.rho must be positive, got {self.rho}")
        if not self.delta > 0.0:
            raise ValueError(f"ascent.delta must be positive, got {self.delta}")
        kind = AscentKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is AscentKind.ZSHARP and self.filter is None:
            object.__setattr__(self, "filter", FilterConfig())
        if kind is AscentKind.SAM and self.filter is not None:
            raise ValueError("SAM ascent takes no filter config")

    @classmethod
    def sam(cls, rho: float = 0.05, delta: float = DEFAULT_DELTA) -> "AscentConfig":
        return cls(rho=rho, delta=delta, kind=AscentKind.SAM)

    @classmethod
    def zsharp(cls, rho: float = 0.05, qp: float = 0.95, delta: float = DEFAULT_DELTA, **filter_kw) -> "AscentConfig":
        return cls(rho=rho, delta=delta, kind=AscentKind.ZSHARP, filter=FilterConfig(qp=qp, **filter_kw))


def _normalized(g: GradientSet, n: float, rho: float, delta: float) -> GradientSet:
    return g.scale(rho / (n + delta))


def compute_perturbation(g: GradientSet, cfg: AscentConfig) -> tuple[GradientSet, FilterOutcome | None]:
    """Perturbation of radius ``rho`` (up to the ``delta`` guard).

    ZSharp falls back to the full gradient direction when the filtered
    gradient is exactly zero (e.g. every Z-score tied at the threshold).
    """
    if cfg.kind is AscentKind.SAM:
        return _normalized(g, norm2(g.flatten()), cfg.rho, cfg.delta), None
    outcome = filter_gradient(g, cfg.filter)
    if outcome.filtered_norm > 0.0:
        return _normalized(outcome.filtered, outcome.filtered_norm, cfg.rho, cfg.delta), outcome
    return _normalized(g, norm2(g.flatten()), cfg.rho, cfg.delta), outcome


def ascend(w: ParamSet, epsilon: GradientSet) -> ParamSet:
    """``w + epsilon`` as a new set; ``w`` is left untouched."""
    return w + epsilon


# -- base optimizers -------------------------------------------------------


class BaseOptimizer(Protocol):
    def step(self, w: ParamSet, g: GradientSet, lr: float) -> ParamSet: ...


@dataclass
class SGD:
    """Plain SGD with optional heavy-ball momentum and L2 weight decay."""

    momentum: float = 0.0
    weight_decay: float = 0.0
    buf: GradientSet | None = field(default=None, repr=False)
    t: int = 0

    def step(self, w: ParamSet, g: GradientSet, lr: float) -> ParamSet:
        w.check_layout(g)
        d = g
        if self.weight_decay:
            d = d + w.scale(self.weight_decay)
        if self.momentum:
            self.buf = d.copy() if self.buf is None else self.buf.scale(self.momentum) + d
            d = self.buf
        self.t += 1
        return w - d.scale(lr)


@dataclass
class AdamW:
    """AdamW with bias correction and decoupled weight decay.

    ``w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)``
    """

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-5
    m: GradientSet | None = field(default=None, repr=False)
    v: GradientSet | None = field(default=None, repr=False)
    t: int = 0

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("AdamW betas must lie in (0, 1)")

    def step(self, w: ParamSet, g: GradientSet, lr: float) -> ParamSet:
        w.check_layout(g)
        if self.m is None:
            self.m, self.v = g.zeros_like(), g.zeros_like()
        b1, b2 = self.beta1, self.beta2
        self.t += 1
        self.m = self.m.zip_map(g, lambda m, gi: b1 * m + (1.0 - b1) * gi)
        self.v = self.v.zip_map(g, lambda v, gi: b2 * v + (1.0 - b2) * gi * gi)
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        new = []
        for p, m, v in zip(w.tensors, self.m.tensors, self.v.tensors):
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p
            new.append(p - lr * update)
        return type(w)(w.ids, tuple(new))


def adamw_step(state: AdamW, w: ParamSet, g: GradientSet, lr: float) -> tuple[AdamW, ParamSet]:
    return state, state.step(w, g, lr)


# -- schedules -------------------------------------------------------------


@dataclass(frozen=True)
class ConstantLr:
    lr: float

    def lr_at(self, epoch: int) -> float:
        return self.lr


@dataclass(frozen=True)
class StepDecay:
    """``base_lr * factor ** floor(epoch / every)``."""

    base_lr: float = 0.001
    factor: float = 0.75
    every: int = 10

    def __post_init__(self):
        if self.every < 1:
            raise ValueError("step decay interval must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * self.factor ** (epoch // self.every)


def lr_at(schedule: ConstantLr | StepDecay, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.lr_at(epoch)


# -- the two-phase step ----------------------------------------------------


class LossModel(Protocol):
    def loss_and_grad(self, params: ParamSet, batch) -> tuple[float, GradientSet]: ...


@dataclass(frozen=True)
class StepReport:
    loss: float
    grad_norm: float
    perturbation_norm: float
    kept_fraction: float | None
    fallback: bool = False


def _checked(model: LossModel, params: ParamSet, batch, step: int) -> tuple[float, GradientSet]:
    try:
        loss, g = model.loss_and_grad(params, batch)
    except FloatingPointError:
        raise DivergenceError(step) from None
    if not math.isfinite(loss) or not g.is_finite():
        raise DivergenceError(step)
    return loss, g


def sam_step(
    model: LossModel,
    batch,
    w: ParamSet,
    base: BaseOptimizer,
    cfg: AscentConfig,
    lr: float,
    step: int = 0,
) -> tuple[ParamSet, StepReport]:
    """One sharpness-aware update. ``base`` keeps its state and is advanced once."""
    loss, g1 = _checked(model, w, batch, step)
    epsilon, outcome = compute_perturbation(g1, cfg)
    snapshot = w
    g2 = _checked(model, ascend(w, epsilon), batch, step)[1]
    new_w = base.step(snapshot, g2, lr)
    if not new_w.is_finite():
        raise DivergenceError(step, "parameters")
    kept = outcome.mask.kept_fraction if outcome is not None else None
    fallback = outcome is not None and outcome.filtered_norm == 0.0
    report = StepReport(loss, norm2(g1.flatten()), norm2(epsilon.flatten()), kept, fallback)
    return new_w, report


def base_step(
    model: LossModel, batch, w: ParamSet, base: BaseOptimizer, lr: float, step: int = 0
) -> tuple[ParamSet, StepReport]:
    """Plain base-optimizer update (no ascent), reported in the same shape."""
    loss, g = _checked(model, w, batch, step)
    new_w = base.step(w, g, lr)
    if not new_w.is_finite():
        raise DivergenceError(step, "parameters")
    return new_w, StepReport(loss, norm2(g.flatten()), 0.0, None)
