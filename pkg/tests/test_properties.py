import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from softtopk.applications import beam_step_mix
from softtopk.backward import vjp_plan_to_cost, vjp_soft_topk
from softtopk.ot_core import EotConfig, build_sorted_problem, build_topk_problem, solve_eot
from softtopk.topk import soft_topk, sorted_soft_topk

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
SETTINGS = settings(max_examples=60, deadline=None)


@st.composite
def instances(draw, max_n=30):
    n = draw(st.integers(2, max_n))
    x = draw(arrays(float, n, elements=finite))
    k = draw(st.integers(1, n - 1))
    eps = draw(st.sampled_from([1e-3, 1e-2, 1e-1, 1.0]))
    return x, k, eps


@SETTINGS
@given(instances())
def test_plan_is_feasible_and_nonnegative(inst):
    x, k, eps = inst
    cfg = EotConfig(epsilon=eps, max_iter=2000)
    for build in (build_topk_problem, build_sorted_problem):
        p = build(x, min(k, 4) if build is build_sorted_problem else k, cfg)
        plan = solve_eot(p, cfg)
        assert np.isfinite(plan.gamma).all() and (plan.gamma >= 0).all()
        # the column update comes last, so column sums are exact
        np.testing.assert_allclose(plan.gamma.sum(axis=0), p.marginals.nu, atol=1e-12)


@SETTINGS
@given(instances())
def test_soft_topk_sums_to_k(inst):
    x, k, eps = inst
    cfg = EotConfig(epsilon=eps, max_iter=2000, residual_tol=1e-10)
    out = soft_topk(x, k, cfg)
    assert abs(out.a.sum() - k) <= max(1e-6, out.problem.n * out.plan.marginal_residual + 1e-9)
    assert out.a.min() >= 0 and out.a.max() <= 1 + out.problem.n * out.plan.marginal_residual + 1e-9


@SETTINGS
@given(instances(max_n=15), st.randoms(use_true_random=False))
def test_permutation_equivariance(inst, rnd):
    x, k, eps = inst
    perm = np.arange(x.size)
    rnd.shuffle(perm)
    cfg = EotConfig(epsilon=max(eps, 1e-2), max_iter=500)
    a = soft_topk(x, k, cfg).a
    b = soft_topk(x[perm], k, cfg).a
    np.testing.assert_allclose(b, a[perm], atol=1e-9)


@SETTINGS
@given(instances(max_n=12))
def test_sorted_columns_sum_to_one(inst):
    x, k, eps = inst
    k = min(k, 4)
    out = sorted_soft_topk(x, k, EotConfig(epsilon=eps, max_iter=2000, residual_tol=1e-10))
    np.testing.assert_allclose(out.a.sum(axis=0), 1.0, atol=max(1e-6, 20 * out.plan.marginal_residual * x.size))


@SETTINGS
@given(instances(max_n=20), st.integers(0, 2**32 - 1))
def test_vjp_is_linear(inst, seed):
    x, k, _ = inst
    cfg = EotConfig(epsilon=0.1, max_iter=2000, residual_tol=1e-12)
    out = soft_topk(x, k, cfg)
    if out.plan.gamma.min() < 1e-200:
        return  # numerically a vertex
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, x.size))
    try:
        gu, gv, guv = (vjp_soft_topk(w, out, cfg) for w in (u, v, 2 * u - 3 * v))
    except ArithmeticError:
        return
    scale = max(1.0, np.abs(gu).max(), np.abs(gv).max())
    np.testing.assert_allclose(guv, 2 * gu - 3 * gv, atol=1e-9 * scale)


@SETTINGS
@given(instances(max_n=20))
def test_cost_gradient_invisible_to_marginal_shifts(inst):
    # adding a row/column constant to C does not change the plan, so the
    # cost gradient must be orthogonal to those directions
    x, k, _ = inst
    cfg = EotConfig(epsilon=0.1, max_iter=2000, residual_tol=1e-13)
    p = build_topk_problem(x, k, cfg)
    plan = solve_eot(p, cfg)
    if plan.gamma.min() < 1e-200 or plan.marginal_residual > 1e-10:
        return
    g = np.cos(np.arange(plan.gamma.size)).reshape(plan.gamma.shape)
    try:
        gc = vjp_plan_to_cost(g, plan, p.marginals, cfg.epsilon)
    except ArithmeticError:
        return
    scale = max(1.0, np.abs(gc).max())
    np.testing.assert_allclose(gc.sum(axis=1), 0.0, atol=1e-6 * scale)
    np.testing.assert_allclose(gc.sum(axis=0), 0.0, atol=1e-6 * scale)


@SETTINGS
@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_beam_mix_is_linear(V, k, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.random((2, V, k, k))
    W, H = rng.standard_normal((V, 3)), rng.standard_normal((k, 2))
    mA, mB, mAB = beam_step_mix(A, W, H), beam_step_mix(B, W, H), beam_step_mix(A + 2 * B, W, H)
    np.testing.assert_allclose(mAB.next_embeddings, mA.next_embeddings + 2 * mB.next_embeddings)
    np.testing.assert_allclose(mAB.next_hidden, mA.next_hidden + 2 * mB.next_hidden)
