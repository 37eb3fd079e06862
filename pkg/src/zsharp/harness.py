"""Desk-scale experiment harness.

Training runs with per-epoch metrics, Q_p sweeps and method comparisons with
seed aggregation, a one-step sharpness probe, and empirical checks of the
ZSharp-SAM convergence bounds on full-batch quadratics.

Output schemas
--------------
metrics.csv
    ``epoch,train_loss,test_acc,grad_norm,kept_fraction,sharpness``.
    ``train_loss`` is the mean minibatch loss at the pre-step weights,
    ``grad_norm`` the mean pre-step gradient norm, ``kept_fraction`` the
    mean mask density (ZSharp only), ``sharpness`` the probe on the full
    training set at the end of the epoch. Absent values are empty fields.
manifest
    JSON object: ``format``, ``version``, ``library_version``, ``config``
    (the full RunConfig tree), ``config_hash``, ``seed``, ``init_digest``,
    ``status``, ``error``, ``epochs_completed``, ``wall_clock_seconds``,
    ``summary``.
sweep.csv / compare.csv
    See :data:`SWEEP_HEADER` and :data:`COMPARE_HEADER`. Statistics are the
    mean and population std over seeds of the final-epoch values.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .config import RunConfig
from .core import ParamSet, norm2, single_layer
from .datasets import (
    GENERATORS,
    BatchPlan,
    Dataset,
    load_idx_pair,
    minibatches,
    split,
)
from .model import Mlp, MlpSpec, QuadraticProblem, predict_accuracy
from .optim import (
    AdamW,
    AscentConfig,
    ConstantLr,
    DivergenceError,
    SGD,
    StepDecay,
    base_step,
    compute_perturbation,
    sam_step,
)
from .zfilter import FilterConfig, Scope, filter_gradient

METRICS_HEADER = ("epoch", "train_loss", "test_acc", "grad_norm", "kept_fraction", "sharpness")
SWEEP_HEADER = (
    "qp", "n_seeds", "n_failed",
    "test_acc_mean", "test_acc_std", "train_loss_mean", "train_loss_std",
)
COMPARE_HEADER = (
    "method", "qp", "rho", "n_seeds", "n_failed",
    "test_acc_mean", "test_acc_std", "train_loss_mean", "train_loss_std",
    "sharpness_mean", "sharpness_std", "kept_fraction_mean", "config_hash",
)
MANIFEST_FORMAT = "zsharp-run-manifest"

# relative slack on the step-size preconditions, so boundary values such as
# r = 0.05, beta = 10 (0.05**2 * 100 = 0.25000000000000006) are admitted
_PRECONDITION_RTOL = 1e-12


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


# -- single runs -----------------------------------------------------------


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    test_acc: float
    grad_norm: float
    kept_fraction: float | None = None
    sharpness: float | None = None

    def row(self) -> list[str]:
        return [_fmt(getattr(self, k)) for k in METRICS_HEADER]


@dataclass(eq=False)
class RunResult:
    config: RunConfig
    metrics: list[EpochMetrics]
    summary: dict
    wall_clock_seconds: float
    init_digest: str
    params: ParamSet
    status: str = "ok"
    error: str | None = None

    @property
    def final(self) -> EpochMetrics | None:
        return self.metrics[-1] if self.metrics else None


def build_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.name == "idx":
        ds = load_idx_pair(d.images, d.labels)
        if d.test_images and d.test_labels:
            test = load_idx_pair(d.test_images, d.test_labels)
            n_classes = max(ds.n_classes, test.n_classes)
            return (Dataset(ds.features, ds.labels, n_classes),
                    Dataset(test.features, test.labels, n_classes))
        return split(ds, d.test_fraction, d.seed)
    gen = GENERATORS[d.name]
    kw = {"noise": d.noise, "seed": d.seed, "label_noise": d.label_noise}
    if d.name != "two-moons":
        kw["n_classes"] = d.classes
    return split(gen(d.n, **kw), d.test_fraction, d.seed)


def build_base_optimizer(cfg: RunConfig):
    o = cfg.optimizer
    if o.base == "adamw":
        return AdamW(beta1=o.beta1, beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay)
    return SGD(momentum=o.momentum, weight_decay=o.weight_decay)


def build_schedule(cfg: RunConfig):
    s = cfg.schedule
    if s.kind == "constant":
        return ConstantLr(cfg.optimizer.lr)
    return StepDecay(cfg.optimizer.lr, s.factor, s.every)


def build_ascent(cfg: RunConfig) -> AscentConfig | None:
    if cfg.kind == "base":
        return None
    if cfg.kind == "sam":
        return AscentConfig.sam(cfg.ascent.rho, cfg.ascent.delta)
    f = cfg.filter
    return AscentConfig.zsharp(cfg.ascent.rho, f.qp, cfg.ascent.delta, scope=Scope(f.scope), sigma_eps=f.sigma_eps)


def sharpness_probe(model, params: ParamSet, dataset, rho: float, delta: float = 1e-8) -> float:
    """``L(w + eps) - L(w)`` with the SAM perturbation of radius ``rho``
    built from the full-dataset gradient."""
    if not rho > 0:
        raise ValueError("probe rho must be positive")
    loss, g = model.loss_and_grad(params, dataset)
    eps, _ = compute_perturbation(g, AscentConfig.sam(rho, delta))
    return model.loss_and_grad(params + eps, dataset)[0] - loss


def _mean(xs):
    return float(np.mean(xs)) if len(xs) else None


def train(cfg: RunConfig, on_epoch: Callable[[EpochMetrics], None] | None = None) -> RunResult:
    """Run one configuration end to end. Deterministic in ``cfg``.

    A :class:`DivergenceError` propagates with ``.partial`` set to the
    :class:`RunResult` accumulated so far.
    """
    cfg.validate()
    started = time.perf_counter()
    train_set, test_set = build_datasets(cfg)
    spec = MlpSpec(train_set.n_features, cfg.model.hidden, train_set.n_classes, seed=cfg.seed)
    model = Mlp(spec)
    params = model.init_params()
    init_digest = params.digest()
    base = build_base_optimizer(cfg)
    schedule = build_schedule(cfg)
    ascent = build_ascent(cfg)
    plan = BatchPlan(cfg.train.batch_size, cfg.seed, cfg.train.drop_last)

    metrics: list[EpochMetrics] = []
    step = 0

    def result(status="ok", error=None) -> RunResult:
        final = metrics[-1] if metrics else None
        summary = {
            "epochs_completed": len(metrics),
            "steps": step,
            "final_train_loss": final.train_loss if final else None,
            "final_test_acc": final.test_acc if final else None,
            "final_train_acc": predict_accuracy(params, train_set),
            "final_grad_norm": final.grad_norm if final else None,
            "final_kept_fraction": final.kept_fraction if final else None,
            "final_sharpness": final.sharpness if final else None,
        }
        return RunResult(cfg, metrics, summary, time.perf_counter() - started, init_digest, params, status, error)

    try:
        for epoch in range(cfg.train.epochs):
            lr = schedule.lr_at(epoch)
            losses, norms, kept = [], [], []
            for batch in minibatches(train_set, plan, epoch):
                if ascent is None:
                    params, rep = base_step(model, batch, params, base, lr, step)
                else:
                    params, rep = sam_step(model, batch, params, base, ascent, lr, step)
                step += 1
                losses.append(rep.loss)
                norms.append(rep.grad_norm)
                if rep.kept_fraction is not None:
                    kept.append(rep.kept_fraction)
            sharp = None
            if cfg.probe.rho is not None:
                sharp = sharpness_probe(model, params, train_set, cfg.probe.rho, cfg.ascent.delta)
                if not math.isfinite(sharp):
                    raise DivergenceError(step, "sharpness probe")
            m = EpochMetrics(
                epoch=epoch,
                train_loss=_mean(losses),
                test_acc=predict_accuracy(params, test_set),
                grad_norm=_mean(norms),
                kept_fraction=_mean(kept) if cfg.kind == "zsharp" else None,
                sharpness=sharp,
            )
            metrics.append(m)
            if on_epoch is not None:
                on_epoch(m)
    except (DivergenceError, FloatingPointError) as exc:
        err = exc if isinstance(exc, DivergenceError) else DivergenceError(step)
        err.partial = result("diverged", str(err))
        if err is exc:
            raise
        raise err from exc
    return result()


def metrics_csv(metrics: Sequence[EpochMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for m in metrics:
        w.writerow(m.row())
    return buf.getvalue()


def manifest(result: RunResult) -> dict:
    return {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "library_version": __version__,
        "config": result.config.to_dict(),
        "config_hash": result.config.config_hash(),
        "seed": result.config.seed,
        "init_digest": result.init_digest,
        "status": result.status,
        "error": result.error,
        "epochs_completed": len(result.metrics),
        "wall_clock_seconds": result.wall_clock_seconds,
        "summary": result.summary,
    }


def write_run(result: RunResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(result.metrics), encoding="utf-8")
    (out / "manifest").write_text(json.dumps(manifest(result), indent=2) + "\n", encoding="utf-8")


# -- multi-run orchestration ----------------------------------------------


@dataclass
class RunOutcome:
    config: RunConfig
    result: RunResult | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _run_one(cfg: RunConfig) -> RunOutcome:
    try:
        return RunOutcome(cfg, train(cfg))
    except DivergenceError as exc:
        return RunOutcome(cfg, exc.partial, str(exc))


def run_many(configs: Sequence[RunConfig], jobs: int = 1) -> list[RunOutcome]:
    """Run configurations; results come back in input order."""
    if jobs <= 1 or len(configs) <= 1:
        return [_run_one(c) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, configs))


def _stats(xs) -> tuple[float | None, float | None]:
    xs = [x for x in xs if x is not None]
    if not xs:
        return None, None
    return float(np.mean(xs)), float(np.std(xs))


@dataclass(frozen=True)
class SweepRow:
    qp: float
    n_seeds: int
    n_failed: int
    test_acc_mean: float | None
    test_acc_std: float | None
    train_loss_mean: float | None
    train_loss_std: float | None


@dataclass
class SweepTable:
    rows: list[SweepRow]
    outcomes: dict[tuple[float, int], RunOutcome] = field(default_factory=dict, repr=False)

    @property
    def n_failed(self) -> int:
        return sum(r.n_failed for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, k)) for k in SWEEP_HEADER])
        return buf.getvalue()


def _tag(x: float) -> str:
    return repr(float(x)).replace(".", "p")


def sweep_qp(base_cfg: RunConfig, qp_values: Sequence[float], seeds: Sequence[int], jobs: int = 1,
             out_dir: str | Path | None = None) -> SweepTable:
    """ZSharp over ``qp_values x seeds``; one aggregate row per qp, in the given order."""
    if not qp_values:
        raise ValueError("qp list is empty")
    if not seeds:
        raise ValueError("seed list is empty")
    for qp in qp_values:
        if not 0.0 <= qp < 1.0:
            raise ValueError(f"qp must lie in [0, 1), got {qp}")
    cells = [(qp, s) for qp in qp_values for s in seeds]
    configs = [base_cfg.with_method("zsharp", qp=qp).replace(train__seed=s).validate() for qp, s in cells]
    outcomes = dict(zip(cells, run_many(configs, jobs)))
    if out_dir is not None:
        for (qp, s), oc in outcomes.items():
            if oc.result is not None:
                write_run(oc.result, Path(out_dir) / "runs" / f"qp{_tag(qp)}_seed{s}")
    rows = []
    for qp in qp_values:
        ok = [outcomes[(qp, s)] for s in seeds if outcomes[(qp, s)].ok]
        acc = _stats([o.result.summary["final_test_acc"] for o in ok])
        loss = _stats([o.result.summary["final_train_loss"] for o in ok])
        rows.append(SweepRow(qp, len(seeds), len(seeds) - len(ok), *acc, *loss))
    return SweepTable(rows, outcomes)


@dataclass(frozen=True)
class MethodRow:
    method: str
    qp: float | None
    rho: float | None
    n_seeds: int
    n_failed: int
    test_acc_mean: float | None
    test_acc_std: float | None
    train_loss_mean: float | None
    train_loss_std: float | None
    sharpness_mean: float | None
    sharpness_std: float | None
    kept_fraction_mean: float | None
    config_hash: str


@dataclass
class ComparisonTable:
    rows: list[MethodRow]
    config_hash: str
    init_digests: dict[tuple[str, int], str] = field(default_factory=dict)
    outcomes: dict[tuple[str, int], RunOutcome] = field(default_factory=dict, repr=False)

    def row(self, method: str) -> MethodRow:
        return next(r for r in self.rows if r.method == method)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COMPARE_HEADER)
        for r in self.rows:
            w.writerow([r.method if k == "method" else r.config_hash if k == "config_hash" else _fmt(getattr(r, k))
                        for k in COMPARE_HEADER])
        return buf.getvalue()


def compare_methods(base_cfg: RunConfig, methods: Sequence[str] = ("base", "sam", "zsharp"),
                    seeds: Sequence[int] = (0, 1, 2), jobs: int = 1,
                    out_dir: str | Path | None = None) -> ComparisonTable:
    """Same-seed paired runs of each method on a shared configuration."""
    if not seeds:
        raise ValueError("seed list is empty")
    shared_hash = base_cfg.config_hash()
    cells = [(m, s) for m in methods for s in seeds]
    configs = [base_cfg.with_method(m).replace(train__seed=s).validate() for m, s in cells]
    outcomes = dict(zip(cells, run_many(configs, jobs)))
    if out_dir is not None:
        for (m, s), oc in outcomes.items():
            if oc.result is not None:
                write_run(oc.result, Path(out_dir) / "runs" / f"{m}_seed{s}")
    rows = []
    for m in methods:
        cfg_m = base_cfg.with_method(m)
        ok = [outcomes[(m, s)] for s in seeds if outcomes[(m, s)].ok]
        acc = _stats([o.result.summary["final_test_acc"] for o in ok])
        loss = _stats([o.result.summary["final_train_loss"] for o in ok])
        sharp = _stats([o.result.summary["final_sharpness"] for o in ok])
        kept = _stats([o.result.summary["final_kept_fraction"] for o in ok])[0] if m == "zsharp" else None
        rows.append(MethodRow(m, cfg_m.filter.qp, cfg_m.ascent.rho, len(seeds), len(seeds) - len(ok),
                              *acc, *loss, *sharp, kept, shared_hash))
    digests = {k: oc.result.init_digest for k, oc in outcomes.items() if oc.result is not None}
    return ComparisonTable(rows, shared_hash, digests, outcomes)


# -- convergence diagnostics -----------------------------------------------


@dataclass(frozen=True)
class ConvergenceReport:
    T: int
    eta: float
    r: float
    beta: float
    lhs: float
    rhs: float
    satisfied: bool
    variant: str
    losses: tuple[float, ...] = field(default=(), repr=False)


def _check_step_conditions(beta: float, eta: float, r: float) -> None:
    if not eta > 0:
        raise ValueError("eta must be positive")
    if not r >= 0:
        raise ValueError("ascent radius must be non-negative")
    if eta > (1.0 / (4.0 * beta)) * (1 + _PRECONDITION_RTOL):
        raise ValueError(f"eta exceeds 1/(4 beta): eta={eta}, 1/(4 beta)={1.0 / (4.0 * beta)}")
    if beta**2 * r**2 > 0.25 * (1 + _PRECONDITION_RTOL):
        raise ValueError(f"ascent radius violates beta^2 r^2 <= 1/4: beta^2 r^2 = {beta**2 * r**2}")


def _zsharp_quadratic_step(prob: QuadraticProblem, w: np.ndarray, eta: float, r: float,
                           fcfg: FilterConfig, variant: str, delta: float) -> np.ndarray:
    """Full-batch ascent at ``w``, then descent from ``w`` with the gradient at the ascended point."""
    g = prob.grad(w)
    if variant == "unnormalized":
        ascent = r * filter_gradient(single_layer(g), fcfg).filtered.flatten()
    else:
        eps, _ = compute_perturbation(single_layer(g), AscentConfig(rho=r, delta=delta, kind="zsharp", filter=fcfg))
        ascent = eps.flatten()
    return w - eta * prob.grad(w + ascent)


def verify_descent_bound(prob: QuadraticProblem, eta: float, r: float, T: int,
                    variant: str = "unnormalized", qp: float = 0.5,
                    scope: str | Scope = Scope.GLOBAL, w0=None, delta: float = 1e-8) -> ConvergenceReport:
    """Run T full-batch ZSharp-SAM steps and test
    ``mean_t ||grad L(w_t)||^2 <= 4 (L(w_0) - L(w_T)) / (T eta)``.

    With full batches the minibatch variance terms of the bound are zero.
    The ``normalized`` variant (radius-``r`` ascent) is exploratory: the
    bound is evaluated the same way but carries no guarantee.
    """
    if variant not in ("unnormalized", "normalized"):
        raise ValueError(f"unknown variant {variant!r}")
    if T < 1:
        raise ValueError("T must be >= 1")
    beta = prob.beta
    _check_step_conditions(beta, eta, r)
    if variant == "normalized" and not r > 0:
        raise ValueError("normalized ascent needs r > 0")
    fcfg = FilterConfig(qp=qp, scope=Scope(scope))
    w = np.ones(prob.dim) if w0 is None else np.array(w0, dtype=np.float64)
    loss0 = prob.loss(w)
    losses = [loss0]
    grad_sq = 0.0
    for _ in range(T):
        g = prob.grad(w)
        grad_sq += float(g @ g)
        w = _zsharp_quadratic_step(prob, w, eta, r, fcfg, variant, delta)
        losses.append(prob.loss(w))
    lhs = grad_sq / T
    rhs = 4.0 / (T * eta) * (loss0 - losses[-1])
    return ConvergenceReport(T, eta, r, beta, lhs, rhs, lhs <= rhs, variant, tuple(losses))


@dataclass(frozen=True)
class PolySchedule:
    """``scale / (1 + t) ** power``."""

    scale: float
    power: float

    def __call__(self, t: int) -> float:
        return self.scale / (1.0 + t) ** self.power


@dataclass(frozen=True)
class DiminishingReport:
    checkpoints: tuple[tuple[int, float], ...]  # (T, min_{t<=T} ||grad L(w_t)||^2)
    threshold: float
    monotone: bool
    final_min: float
    converged: bool


def check_diminishing_schedules(beta: float, eta: PolySchedule, r: PolySchedule) -> None:
    """Closed-form summability conditions for power-law schedules."""
    if eta.power < 0 or r.power < 0:
        raise ValueError("schedules must be non-increasing (power >= 0)")
    # both schedules are maximal at t = 0
    _check_step_conditions(beta, eta(0), r(0))
    if eta.power > 1:
        raise ValueError("sum of eta_t must diverge (need power <= 1)")
    if eta.power <= 0.5:
        raise ValueError("sum of eta_t^2 must converge (need power > 1/2)")
    if r.scale != 0 and eta.power + 2 * r.power <= 1:
        raise ValueError("sum of eta_t r_t^2 must converge (need eta power + 2 r power > 1)")


def verify_diminishing_steps(prob: QuadraticProblem, eta: PolySchedule, r: PolySchedule,
                      checkpoints: Sequence[int] = (100, 1000, 10000), threshold: float = 1e-4,
                      qp: float = 0.5, scope: str | Scope = Scope.GLOBAL, w0=None) -> DiminishingReport:
    """Diminishing-step ZSharp-SAM (unnormalized ascent) on a full-batch quadratic.

    Tracks the running minimum of ``||grad L(w_t)||^2`` over ``t <= T`` at
    each checkpoint; ``converged`` requires it to be non-increasing across
    checkpoints and below ``threshold`` at the last one.
    """
    check_diminishing_schedules(prob.beta, eta, r)
    checkpoints = sorted(int(c) for c in checkpoints)
    if not checkpoints or checkpoints[0] < 0:
        raise ValueError("checkpoints must be non-negative")
    fcfg = FilterConfig(qp=qp, scope=Scope(scope))
    w = np.ones(prob.dim) if w0 is None else np.array(w0, dtype=np.float64)
    best = math.inf
    trace = []
    pending = list(checkpoints)
    for t in range(checkpoints[-1] + 1):
        g = prob.grad(w)
        best = min(best, float(g @ g))
        while pending and pending[0] == t:
            trace.append((t, best))
            pending.pop(0)
        if not pending:
            break
        w = _zsharp_quadratic_step(prob, w, eta(t), r(t), fcfg, "unnormalized", 0.0)
    mins = [m for _, m in trace]
    monotone = all(b <= a for a, b in zip(mins, mins[1:]))
    final = mins[-1]
    return DiminishingReport(tuple(trace), threshold, monotone, final, monotone and final < threshold)
