import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsharp.core import SeededRng, TensorSet, single_layer
from zsharp.datasets import gen_blobs
from zsharp.model import Mlp, MlpSpec, QuadraticModel, QuadraticProblem
from zsharp.optim import (
    SGD,
    AdamW,
    AscentConfig,
    ConstantLr,
    DivergenceError,
    StepDecay,
    adamw_step,
    ascend,
    base_step,
    compute_perturbation,
    lr_at,
    sam_step,
)
from zsharp.zfilter import FilterConfig, Scope, filter_gradient

from conftest import gaussian_set


def _cos(a, b):
    return float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))


def _mlp_setup(seed=0):
    data = gen_blobs(48, n_classes=3, seed=seed)
    model = Mlp(MlpSpec(2, (8, 6), 3, seed=seed))
    return model, data, model.init_params()


# -- perturbation ----------------------------------------------------------


def test_sam_perturbation_example():
    g = single_layer([3.0, 4.0])
    eps, diag = compute_perturbation(g, AscentConfig.sam(rho=0.05))
    assert diag is None
    assert np.array_equal(eps.flatten(), g.flatten() * (0.05 / (5 + 1e-8)))
    assert np.linalg.norm(eps.flatten()) == pytest.approx(0.05, rel=1e-8)


def test_zsharp_fallback_is_parallel_to_full_gradient():
    # every z-score ties at |z| = 1, so qp=0.5 keeps nothing
    g = TensorSet.from_pairs([("L1", [10.0, 0.0]), ("L2", [1.0, 3.0])])
    eps, diag = compute_perturbation(g, AscentConfig.zsharp(rho=0.05, qp=0.5))
    assert diag.filtered_norm == 0.0
    assert _cos(eps.flatten(), g.flatten()) == pytest.approx(1.0, abs=1e-12)
    assert np.linalg.norm(eps.flatten()) == pytest.approx(0.05, rel=1e-6)


@pytest.mark.parametrize("cfg", [AscentConfig.sam(), AscentConfig.zsharp(qp=0.9)])
def test_zero_gradient_gives_zero_perturbation(cfg):
    g = gaussian_set(0).zeros_like()
    eps, _ = compute_perturbation(g, cfg)
    assert not eps.flatten().any()


def test_ascent_config_validation():
    with pytest.raises(ValueError):
        AscentConfig.sam(rho=0.0)
    with pytest.raises(ValueError):
        AscentConfig.sam(delta=-1.0)
    with pytest.raises(ValueError):
        AscentConfig.zsharp(qp=1.0)


@settings(max_examples=200)
@given(
    st.integers(0, 10**6),
    st.floats(1e-4, 1e3),
    st.floats(1e-3, 1.0),
    st.sampled_from([None, 0.0, 0.5, 0.9]),
)
def test_perturbation_norm_and_direction(seed, scale, rho, qp):
    g = gaussian_set(seed, sizes=(9, 14, 5), std=scale)
    cfg = AscentConfig.sam(rho=rho) if qp is None else AscentConfig.zsharp(rho=rho, qp=qp)
    eps, diag = compute_perturbation(g, cfg)
    e = eps.flatten()
    if diag is None or diag.filtered_norm == 0.0:
        direction = g.flatten()
    else:
        direction = diag.filtered.flatten()
    n = np.linalg.norm(e)
    assert n <= rho * (1 + 1e-12)
    if np.linalg.norm(direction) >= 1e-4:
        assert n >= rho * (1 - 1e-4)
    assert _cos(e, direction) == pytest.approx(1.0, abs=1e-12)


# -- ascend ----------------------------------------------------------------


def test_ascend_examples():
    w = single_layer([1.0, 2.0])
    out = ascend(w, single_layer([0.1, -0.1]))
    assert out.flatten().tolist() == [1.1, 1.9]
    assert w.flatten().tolist() == [1.0, 2.0]
    assert ascend(w, w.zeros_like()).bitwise_equal(w)


def test_ascend_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        ascend(single_layer([1.0, 2.0]), single_layer([1.0, 2.0, 3.0]))


# -- sam_step --------------------------------------------------------------


def test_quadratic_one_step_example():
    model = QuadraticModel(QuadraticProblem.diagonal([1.0, 1.0]))
    w0 = single_layer([1.0, 0.0])
    w1, rep = sam_step(model, None, w0, SGD(), AscentConfig.sam(rho=0.05), lr=0.1)
    # g1 = [1, 0]; w~ = [1 + 0.05/(1+1e-8), 0]; w1 = w0 - 0.1 * w~
    expected = 1.0 - 0.1 * (1.0 + 0.05 / (1.0 + 1e-8))
    assert w1.flatten()[0] == pytest.approx(expected, rel=1e-15)
    assert w1.flatten()[0] == pytest.approx(0.895, abs=1e-9)
    assert w1.flatten()[1] == 0.0
    assert rep.loss == 0.5 and rep.grad_norm == 1.0
    assert rep.perturbation_norm == pytest.approx(0.05, rel=1e-7)
    assert rep.kept_fraction is None


@pytest.mark.parametrize("base_cls", [AdamW, SGD])
@pytest.mark.parametrize("scope", list(Scope))
def test_qp_zero_matches_sam_bitwise_over_100_steps(base_cls, scope):
    model, data, w = _mlp_setup(3)
    ws, wz = w, w
    bs, bz = base_cls(), base_cls()
    sam = AscentConfig.sam(rho=0.05)
    zs = AscentConfig.zsharp(rho=0.05, qp=0.0, scope=scope)
    for step in range(100):
        batch = data.subset(np.arange(step % 3 * 16, step % 3 * 16 + 16))
        ws, _ = sam_step(model, batch, ws, bs, sam, 0.01, step)
        wz, rep = sam_step(model, batch, wz, bz, zs, 0.01, step)
        assert rep.kept_fraction == 1.0
        assert ws.bitwise_equal(wz), f"diverged at step {step}"


def test_tiny_rho_matches_plain_base_step():
    model, data, w = _mlp_setup(1)
    w_sam, _ = sam_step(model, data, w, AdamW(), AscentConfig.sam(rho=1e-300), 0.001)
    w_base, _ = base_step(model, data, w, AdamW(), 0.001)
    a, b = w_sam.flatten(), w_base.flatten()
    assert np.all(np.abs(a - b) <= 1e-12 * np.maximum(np.abs(b), 1e-300))


def test_step_does_not_leak_perturbation():
    model, data, w = _mlp_setup(2)
    snapshot = w.copy()
    cfg = AscentConfig.zsharp(rho=0.05, qp=0.8)
    base = AdamW()
    base.step(w, model.loss_and_grad(w, data)[1], 0.001)  # warm moments
    replay = AdamW(m=base.m, v=base.v, t=base.t)
    new_w, _ = sam_step(model, data, w, base, cfg, 0.001, step=1)
    assert w.bitwise_equal(snapshot)
    eps, _ = compute_perturbation(model.loss_and_grad(w, data)[1], cfg)
    g2 = model.loss_and_grad(ascend(w, eps), data)[1]
    assert replay.step(snapshot, g2, 0.001).bitwise_equal(new_w)
    assert base.t == 2


def test_step_report_for_zsharp():
    model, data, w = _mlp_setup(4)
    _, rep = sam_step(model, data, w, AdamW(), AscentConfig.zsharp(qp=0.9), 0.001)
    d = w.total_dim
    assert rep.kept_fraction == pytest.approx((d - math.floor(0.9 * d)) / d)
    assert not rep.fallback
    assert rep.perturbation_norm == pytest.approx(0.05, rel=1e-6)


def test_divergence_is_reported_with_step_index():
    model = QuadraticModel(QuadraticProblem.diagonal([1.0, 1.0]))
    w = single_layer([1e308, 1e308])
    with pytest.raises(DivergenceError, match="numerical divergence at step 7"):
        with np.errstate(over="ignore", invalid="ignore"):
            sam_step(model, None, w, SGD(), AscentConfig.sam(), 0.1, step=7)


def _unnormalized_run(diag, w0, eta, r, qp, T):
    """Full-batch ascent r * (filtered gradient), descent from w_t with the ascended gradient."""
    A = np.asarray(diag, dtype=float)
    w = np.asarray(w0, dtype=float)
    losses = [0.5 * float(np.sum(A * w * w))]
    for _ in range(T):
        g = A * w
        gf = filter_gradient(single_layer(g), FilterConfig(qp=qp)).filtered.flatten()
        w = w - eta * A * (w + r * gf)
        losses.append(0.5 * float(np.sum(A * w * w)))
    return losses


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(0.1, 20.0), min_size=2, max_size=6),
    st.integers(0, 10**6),
    st.floats(0.05, 1.0),
    st.floats(0.0, 1.0),
    st.sampled_from([0.0, 0.5, 0.8]),
)
def test_descent_sanity_on_convex_quadratic(diag, seed, eta_frac, r_frac, qp):
    beta = max(diag)
    eta = eta_frac / (4 * beta)
    r = r_frac * 0.5 / beta
    w0 = SeededRng(seed).normal(len(diag))
    losses = _unnormalized_run(diag, w0, eta, r, qp, 50)
    for a, b in zip(losses[1:], losses[2:]):
        assert b <= a * (1 + 1e-12) + 1e-300


# -- base optimizers -------------------------------------------------------


def test_adamw_first_step_example():
    opt = AdamW(weight_decay=0.0)
    _, w = adamw_step(opt, single_layer([0.0]), single_layer([1.0]), 0.001)
    assert w.flatten()[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)
    assert opt.t == 1


def test_adamw_zero_gradient_fixed_point():
    opt = AdamW(weight_decay=0.0)
    w = single_layer([0.3, -2.0])
    w = opt.step(w, single_layer([1.0, 1.0]), 0.001)
    m_before = opt.m.flatten().copy()
    w2 = opt.step(w, w.zeros_like(), 0.001)
    assert np.all(np.abs(opt.m.flatten()) < np.abs(m_before))
    # the update comes from the decaying moment, not the zero gradient
    opt0 = AdamW(weight_decay=0.0)
    assert opt0.step(w, w.zeros_like(), 0.001).bitwise_equal(w)
    assert w2.same_layout(w)


def test_adamw_decoupled_decay_alone():
    opt = AdamW(weight_decay=5e-5)
    w = opt.step(single_layer([1.0]), single_layer([0.0]), 0.001)
    assert w.flatten()[0] - 1.0 == pytest.approx(-5e-8, rel=1e-9)


def _adamw_oracle(w, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=5e-5):
    """Scalar loop reference, one coordinate at a time."""
    w = list(w)
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    for t, g in enumerate(grads, 1):
        for i, gi in enumerate(g):
            m[i] = b1 * m[i] + (1 - b1) * gi
            v[i] = b2 * v[i] + (1 - b2) * gi * gi
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            w[i] -= lr * (mh / (math.sqrt(vh) + eps) + wd * w[i])
    return w


def test_adamw_matches_scalar_oracle():
    rng = SeededRng(5)
    w0 = rng.normal(7)
    grads = [rng.normal(7) for _ in range(25)]
    opt = AdamW()
    w = single_layer(w0)
    for g in grads:
        w = opt.step(w, single_layer(g), 0.003)
    assert w.flatten() == pytest.approx(_adamw_oracle(w0, grads, 0.003), rel=1e-12, abs=1e-15)
    assert np.all(opt.v.flatten() >= 0)
    assert opt.t == 25


def test_sgd_momentum_and_decay():
    opt = SGD(momentum=0.9, weight_decay=0.1)
    w = single_layer([1.0])
    w = opt.step(w, single_layer([2.0]), 0.1)  # d = 2 + 0.1 = 2.1
    assert w.flatten()[0] == pytest.approx(1.0 - 0.21)
    w = opt.step(w, single_layer([0.0]), 0.1)  # d = 0.9*2.1 + 0.1*0.79
    assert w.flatten()[0] == pytest.approx(0.79 - 0.1 * (1.89 + 0.079))


# -- schedules -------------------------------------------------------------


def test_lr_at_examples():
    s = StepDecay(0.001, 0.75, 10)
    assert lr_at(s, 0) == 0.001
    assert lr_at(s, 9) == 0.001
    assert lr_at(s, 10) == pytest.approx(0.00075, rel=1e-15)
    assert lr_at(s, 25) == pytest.approx(5.625e-4, rel=1e-15)
    assert lr_at(ConstantLr(0.1), 99) == 0.1
    with pytest.raises(ValueError):
        lr_at(s, -1)


@given(st.integers(0, 10_000))
def test_step_decay_closed_form(epoch):
    s = StepDecay(0.001, 0.75, 10)
    assert lr_at(s, epoch) == 0.001 * 0.75 ** (epoch // 10)
