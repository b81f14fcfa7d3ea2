"""Implicit-differentiation backward pass for the entropic top-k plans.

The optimal duals satisfy the first-order conditions of the dual problem;
differentiating those conditions with the last column dual pinned to zero
gives ``d(duals)/dC`` through a small ``(m-1) x (m-1)`` Schur complement

    K = diag(nu[:-1]) - G[:, :-1].T @ diag(1/mu) @ G[:, :-1]

so a vector-Jacobian product costs ``O(n m)`` time and memory no matter how
many Sinkhorn iterations produced the plan. ``mu`` and ``nu`` are constants.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .ot_core import EotConfig, EotProblem, InstanceTooLarge, Marginals, NumericalFailure, TransportPlan
from .ot_core import build_sorted_problem, build_topk_problem, solve_eot

PIVOT_TOL = 1e-12
MAX_NAIVE_N = 64


@dataclass(frozen=True)
class DualHessianBlocks:
    kappa: np.ndarray
    kappa_inv: np.ndarray
    l_matrix: np.ndarray


def laplacian_kappa(gamma, mu):
    """``K`` as the reduced Laplacian of ``W = G^T diag(1/mu) G``.

    On a feasible plan this equals ``diag(nu_bar) - G_bar^T diag(1/mu) G_bar``
    but needs no subtraction, so it keeps full relative accuracy when the
    plan is nearly hard and ``K`` is tiny next to ``nu``.
    """
    W = gamma.T @ (gamma / mu[:, None])
    np.fill_diagonal(W, 0.0)
    kappa = -W[:-1, :-1]
    kappa[np.diag_indices_from(kappa)] = W[:-1].sum(axis=1)
    return kappa


def dual_hessian_blocks(gamma: np.ndarray, marginals: Marginals) -> DualHessianBlocks:
    """Schur complement ``K``, its inverse and ``L = diag(1/mu) G_bar K^-1``.

    Raises :class:`NumericalFailure` when an LU pivot of ``K`` falls below
    ``1e-12`` relative to ``max(nu_bar)``, i.e. the plan is (numerically) a
    vertex and the implicit function theorem gives no usable Jacobian.
    """
    inv_mu = 1.0 / marginals.mu
    nu_bar = marginals.nu[:-1]
    g_bar = gamma[:, :-1]
    g_mu = inv_mu[:, None] * g_bar
    kappa = laplacian_kappa(gamma, marginals.mu)
    with warnings.catch_warnings():
        # singularity is reported below as NumericalFailure
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(kappa, check_finite=False)
    if np.abs(np.diag(lu)).min() < PIVOT_TOL * nu_bar.max():
        raise NumericalFailure("dual Hessian is singular: the plan is degenerate")
    kappa_inv = scipy.linalg.lu_solve((lu, piv), np.eye(kappa.shape[0]), check_finite=False)
    return DualHessianBlocks(kappa=kappa, kappa_inv=kappa_inv, l_matrix=g_mu @ kappa_inv)


def _pad_last(v):
    return np.concatenate([v, np.zeros(v.shape[:-1] + (1,))], axis=-1)


def vjp_plan_to_cost(grad_gamma, plan: TransportPlan, marginals: Marginals, epsilon: float) -> np.ndarray:
    """``dL/dC`` from ``dL/dGamma`` by row/column reductions only.

    Every intermediate is ``n x m`` or smaller.
    """
    gamma = plan.gamma
    grad_gamma = np.asarray(grad_gamma, dtype=float)
    if grad_gamma.shape != gamma.shape:
        raise ValueError(f"grad_gamma has shape {grad_gamma.shape}, plan has {gamma.shape}")
    blocks = dual_hessian_blocks(gamma, marginals)
    inv_mu = 1.0 / marginals.mu
    L, kinv = blocks.l_matrix, blocks.kappa_inv
    g_mu = inv_mu[:, None] * gamma[:, :-1]

    G1 = grad_gamma * gamma
    g1 = G1.sum(axis=1)
    g1_L = g1 @ L
    row_coef = g1 * inv_mu + g_mu @ g1_L
    col_coef = -_pad_last(g1_L)

    g2 = G1.sum(axis=0)[:-1]
    row_coef -= L @ g2
    col_coef += _pad_last(kinv @ g2)

    return (-G1 + (row_coef[:, None] + col_coef[None, :]) * gamma) / epsilon


def vjp_naive(grad_gamma, plan: TransportPlan, marginals: Marginals, epsilon: float) -> np.ndarray:
    """Reference VJP that materializes ``d xi/dC`` (n, n, m) and ``d b/dC`` (m, n, m)."""
    gamma = plan.gamma
    n, m = gamma.shape
    if n > MAX_NAIVE_N:
        raise InstanceTooLarge(f"naive VJP limited to n <= {MAX_NAIVE_N}, got {n}")
    grad_gamma = np.asarray(grad_gamma, dtype=float)
    blocks = dual_hessian_blocks(gamma, marginals)
    inv_mu = np.diag(1.0 / marginals.mu)
    g_bar = gamma[:, :-1]
    kinv = blocks.kappa_inv

    H1 = inv_mu + inv_mu @ g_bar @ kinv @ g_bar.T @ inv_mu
    H2 = _pad_last(-inv_mu @ g_bar @ kinv)
    H3 = (-inv_mu @ g_bar @ kinv).T
    H4 = _pad_last(kinv)

    dxi = H1[:, :, None] * gamma[None, :, :] + H2[:, None, :] * gamma[None, :, :]
    db = H3[:, :, None] * gamma[None, :, :] + H4[:, None, :] * gamma[None, :, :]
    db = np.concatenate([db, np.zeros((1, n, m))], axis=0)

    W = grad_gamma * gamma
    return (-W + np.einsum("hl,hij->ij", W, dxi) + np.einsum("hl,lij->ij", W, db)) / epsilon


def chain_cost_to_scores(grad_c, problem: EotProblem) -> np.ndarray:
    """Pull ``dL/dC`` back to the input scores through ``C = (s x - y)^2 / z``.

    The normalizer ``z`` and the ``-inf`` fill value are constants; masked
    entries get zero gradient.
    """
    diff = problem.scores[:, None] - problem.anchors[None, :]
    grad_x = problem.sign * (np.asarray(grad_c) * 2.0 * diff).sum(axis=1) / problem.normalizer
    grad_x[problem.masked] = 0.0
    return grad_x


def _lift(grad_a, out):
    n, m = out.plan.gamma.shape
    grad_a = np.asarray(grad_a, dtype=float)
    grad_gamma = np.zeros((n, m))
    if grad_a.ndim == 1:
        grad_gamma[:, 0] = n * grad_a
    else:
        grad_gamma[:, : grad_a.shape[1]] = n * grad_a
    return grad_gamma


def vjp_soft_topk(grad_a, out, cfg: EotConfig | None = None) -> np.ndarray:
    """``dL/dx`` given ``dL/da`` for a :func:`soft_topk` or :func:`sorted_soft_topk` output."""
    epsilon = out.plan.epsilon if cfg is None else cfg.epsilon
    grad_c = vjp_plan_to_cost(_lift(grad_a, out), out.plan, out.problem.marginals, epsilon)
    return chain_cost_to_scores(grad_c, out.problem)


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], x, h=None) -> np.ndarray:
    """Central differences; default step ``1e-4 * max(1, |x_i|)`` per coordinate."""
    x = np.asarray(x, dtype=float)
    steps = 1e-4 * np.maximum(1.0, np.abs(x)) if h is None else np.broadcast_to(h, x.shape)
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = steps[i]
        grad[i] = (loss_fn(x + e) - loss_fn(x - e)) / (2 * steps[i])
    return grad


@dataclass(frozen=True)
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_err: float
    marginal_residual: float


def grad_check(x, k, cfg: EotConfig, probe, *, sorted=False, h=None) -> GradCheckReport:
    """Compare the implicit gradient of ``sum(probe * a)`` with finite differences.

    The finite-difference loss keeps the cost normalizer of the base point
    fixed, matching the stop-gradient in :func:`chain_cost_to_scores`. The
    relative error is taken over entries with ``|numeric| > 1e-8``.
    """
    from .topk import SortedTopkOutput, TopkOutput

    x = np.asarray(x, dtype=float)
    probe = np.asarray(probe, dtype=float)
    build = build_sorted_problem if sorted else build_topk_problem
    base = build(x, k, cfg)

    def forward(xs, normalizer):
        problem = build(xs, k, cfg, normalizer=normalizer)
        plan = solve_eot(problem, cfg)
        a = problem.n * (plan.gamma[:, :k] if sorted else plan.gamma[:, 0])
        return problem, plan, a

    problem, plan, a = forward(x, base.normalizer)
    out = (SortedTopkOutput if sorted else TopkOutput)(a=a, plan=plan, problem=problem)
    analytic = vjp_soft_topk(probe, out, cfg)
    numeric = finite_diff_grad(lambda xs: float((probe * forward(xs, base.normalizer)[2]).sum()), x, h)
    sel = np.abs(numeric) > 1e-8
    rel = np.abs(analytic[sel] - numeric[sel]) / np.abs(numeric[sel])
    return GradCheckReport(
        analytic=analytic,
        numeric=numeric,
        max_rel_err=float(rel.max()) if rel.size else 0.0,
        marginal_residual=plan.marginal_residual,
    )
