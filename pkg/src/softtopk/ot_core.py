"""Entropic optimal transport for (sorted) top-k.

Scores are transported onto a handful of fixed anchors under a squared
Euclidean cost:

* top-k: anchors ``[0, 1]`` with target mass ``[k/n, (n-k)/n]``;
* sorted top-k: anchors ``[0, 1, ..., k]`` with target mass
  ``[1/n, ..., 1/n, (n-k)/n]``.

Sources always carry uniform mass ``1/n``. The entropic problem
``min <C, G> + eps * sum(G log G)`` is solved by Sinkhorn scaling, either
with plain multiplicative updates or with log-sum-exp potentials. The
exact (unregularized) plans used as test oracles live here too.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

PLAIN_EPS_THRESHOLD = 1e-2
MAX_BRUTEFORCE_N = 12
MAX_BRUTEFORCE_VERTICES = 2_000_000


class SoftTopkError(ValueError):
    """Invalid input to one of the operators."""


class NumericalFailure(ArithmeticError):
    """A solver produced non-finite values or a degenerate system."""


class InstanceTooLarge(SoftTopkError):
    """An exhaustive oracle was asked to enumerate too many vertices."""


@dataclass(frozen=True)
class EotConfig:
    """Solver settings.

    ``eps_scaling`` only affects the log-domain solver: the potentials are
    warm-started through a geometric sequence of larger regularizations
    before the final ``epsilon`` stage, all within the ``max_iter`` budget.
    ``stop_at_fixed_point`` ends a run once an iteration leaves the
    potentials bit-for-bit unchanged; the result is identical to running
    all ``max_iter`` iterations, only faster. Benchmarks turn it off to time
    a fixed amount of work. ``newton`` lets the log-domain solver switch to
    damped Newton steps on the column potentials once ``NEWTON_AFTER``
    Sinkhorn iterations at the final ``epsilon`` have not met
    ``residual_tol``; it has no effect without a tolerance. Each Newton
    step counts as one iteration.
    """

    epsilon: float = 1e-2
    max_iter: int = 200
    mode: str = "auto"
    residual_tol: float | None = None
    normalize_cost: bool = True
    eps_scaling: bool = True
    stop_at_fixed_point: bool = True
    newton: bool = True

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise SoftTopkError(f"epsilon must be positive, got {self.epsilon!r}")
        if self.max_iter < 1:
            raise SoftTopkError(f"max_iter must be >= 1, got {self.max_iter!r}")
        if self.mode not in ("plain", "log", "auto"):
            raise SoftTopkError(f"unknown mode {self.mode!r}")
        if self.residual_tol is not None and self.residual_tol < 0:
            raise SoftTopkError("residual_tol must be non-negative")


@dataclass(frozen=True)
class Marginals:
    mu: np.ndarray
    nu: np.ndarray


@dataclass(frozen=True)
class EotProblem:
    """A squared-distance transport problem from scores to anchors.

    ``scores`` holds the values the cost was built from: the input after
    ``-inf`` masking and, for largest-k problems, negation (``sign == -1``).
    ``cost`` is already divided by ``normalizer``.
    """

    cost: np.ndarray
    marginals: Marginals
    normalizer: float
    anchors: np.ndarray
    scores: np.ndarray
    masked: np.ndarray
    k: int
    sorted: bool = False
    sign: float = 1.0

    @property
    def n(self) -> int:
        return self.cost.shape[0]

    @property
    def m(self) -> int:
        return self.cost.shape[1]


@dataclass(frozen=True)
class TransportPlan:
    """A coupling plus the diagnostics of the run that produced it.

    ``dual_f`` and ``dual_g`` are the log-domain potentials
    (``eps * log`` of the Sinkhorn scalings); exact plans carry ``None``.
    """

    gamma: np.ndarray
    dual_f: np.ndarray | None
    dual_g: np.ndarray | None
    iters_run: int
    marginal_residual: float
    mode_used: str = "log"
    epsilon: float | None = None
    objective: float | None = field(default=None, compare=False)


def marginal_residual(gamma: np.ndarray, marginals: Marginals) -> float:
    row = np.abs(gamma.sum(axis=1) - marginals.mu).max()
    col = np.abs(gamma.sum(axis=0) - marginals.nu).max()
    return float(max(row, col))


def mask_scores(x) -> tuple[np.ndarray, np.ndarray]:
    """Validate scores and replace ``-inf`` entries.

    Masked entries become ``min - (max - min)`` over the finite entries.
    Returns the filled vector and the boolean mask of replaced entries.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise SoftTopkError(f"scores must be a 1-D vector, got shape {x.shape}")
    if x.size < 2:
        raise SoftTopkError("need at least two scores")
    masked = np.isneginf(x)
    finite = np.isfinite(x)
    if not np.all(finite | masked):
        raise SoftTopkError("scores must be finite or -inf")
    if not finite.any():
        raise SoftTopkError("all scores are -inf")
    lo, hi = x[finite].min(), x[finite].max()
    out = x.copy()
    out[masked] = lo - (hi - lo)
    return out, masked


def _check_k(k, n):
    if isinstance(k, bool) or int(k) != k:
        raise SoftTopkError(f"k must be an integer, got {k!r}")
    if not 1 <= k < n:
        raise SoftTopkError(f"k must satisfy 1 <= k < n (n={n}), got {k}")
    return int(k)


def _build(x, k, anchors, nu, cfg, largest, normalizer, sorted_):
    filled, masked = mask_scores(x)
    n = filled.size
    sign = -1.0 if largest else 1.0
    scores = sign * filled
    cost = (scores[:, None] - anchors[None, :]) ** 2
    if normalizer is None:
        normalizer = float(cost.max()) if cfg.normalize_cost else 1.0
        if normalizer <= 0:
            normalizer = 1.0
    cost = cost / normalizer
    mu = np.full(n, 1.0 / n)
    return EotProblem(
        cost=cost,
        marginals=Marginals(mu=mu, nu=nu),
        normalizer=float(normalizer),
        anchors=anchors,
        scores=scores,
        masked=masked,
        k=k,
        sorted=sorted_,
        sign=sign,
    )


def build_topk_problem(x, k, cfg=EotConfig(), *, largest=False, normalizer=None):
    """Two-anchor problem whose plan marks the ``k`` smallest scores.

    With ``largest=True`` the masked scores are negated first, so the plan
    marks the ``k`` largest instead. Passing ``normalizer`` freezes the
    cost divisor (finite-difference checks hold it constant).
    """
    n = np.asarray(x).size
    k = _check_k(k, n)
    nu = np.array([k / n, (n - k) / n])
    return _build(x, k, np.array([0.0, 1.0]), nu, cfg, largest, normalizer, False)


def build_sorted_problem(x, k, cfg=EotConfig(), *, largest=False, normalizer=None):
    """``k + 1`` anchor problem whose column ``l`` picks the rank-``l`` score."""
    n = np.asarray(x).size
    k = _check_k(k, n)
    nu = np.full(k + 1, 1.0 / n)
    nu[-1] = (n - k) / n
    anchors = np.arange(k + 1, dtype=float)
    return _build(x, k, anchors, nu, cfg, largest, normalizer, True)


NEWTON_AFTER = 50


def _row_potentials(Ct, log_mu, g, eps):
    """``f`` that makes every row sum of the plan exact for the given ``g``."""
    Z = (g[:, None] - Ct) / eps
    zmax = Z.max(axis=0)
    return eps * log_mu - eps * (zmax + np.log(np.exp(Z - zmax).sum(axis=0)))


def _col_error(Ct, f, g, eps, nu):
    P = np.exp((f[None, :] + g[:, None] - Ct) / eps)
    return P, P.sum(axis=1) - nu


def _newton_step(Ct, log_mu, nu, g, eps):
    """One damped Newton step on ``g[:-1]`` with ``f`` eliminated and ``g[-1]`` fixed.

    With rows exact, the Jacobian of the first ``m-1`` column sums in
    ``g[:-1]`` is ``(diag(c) - P P^T / mu)/eps`` restricted to those columns.
    Returns ``None`` when that matrix is singular or no step helps.
    """
    mu = np.exp(log_mu)
    f = _row_potentials(Ct, log_mu, g, eps)
    P, err = _col_error(Ct, f, g, eps, nu)
    Pb = P[:-1]
    kappa = np.diag(P.sum(axis=1)[:-1]) - (Pb / mu) @ Pb.T
    try:
        delta = np.linalg.solve(kappa, -eps * err[:-1])
    except np.linalg.LinAlgError:
        return None
    if not np.isfinite(delta).all():
        return None
    base = np.abs(err).max()
    t = 1.0
    for _ in range(30):
        g_try = g.copy()
        g_try[:-1] += t * delta
        f_try = _row_potentials(Ct, log_mu, g_try, eps)
        if np.abs(_col_error(Ct, f_try, g_try, eps, nu)[1]).max() < base:
            return f_try, g_try
        t *= 0.5
    return None


def _stopped(gamma, marginals, tol):
    return tol is not None and marginal_residual(gamma, marginals) <= tol


def sinkhorn_plain(p: EotProblem, cfg: EotConfig) -> TransportPlan:
    """Multiplicative Sinkhorn scaling on ``G = exp(-C / eps)``.

    Raises :class:`NumericalFailure` as soon as a scaling becomes non-finite,
    which happens when a whole row or column of ``G`` underflows.
    """
    eps = cfg.epsilon
    mu, nu = p.marginals.mu, p.marginals.nu
    with np.errstate(all="ignore"):
        G = np.exp(-p.cost / eps)
        q = np.full(p.m, 1.0 / p.m)
        newton = cfg.newton and cfg.residual_tol is not None
        Ct = np.ascontiguousarray(p.cost.T) if newton else None
        it = 0
        for it in range(1, cfg.max_iter + 1):
            if newton and it > NEWTON_AFTER:
                # same polish as the log-domain solver, on g = eps * log(q)
                polished = _newton_step(Ct, np.log(mu), nu, eps * np.log(q), eps)
                if polished is not None:
                    u, q = np.exp(polished[0] / eps), np.exp(polished[1] / eps)
                    if _stopped(u[:, None] * G * q[None, :], p.marginals, cfg.residual_tol):
                        break
                    continue
                newton = False
            u = mu / (G @ q)
            q_prev, q = q, nu / (G.T @ u)
            if not (np.isfinite(u).all() and np.isfinite(q).all()):
                raise NumericalFailure(f"non-finite scaling at iteration {it} (eps={eps})")
            if cfg.stop_at_fixed_point and np.array_equal(q, q_prev):
                # exact fixed point: further iterations are no-ops
                break
            if cfg.residual_tol is not None:
                gamma = u[:, None] * G * q[None, :]
                if _stopped(gamma, p.marginals, cfg.residual_tol):
                    break
        gamma = u[:, None] * G * q[None, :]
        f, g = eps * np.log(u), eps * np.log(q)
    if not np.isfinite(gamma).all() or not (np.isfinite(f).all() and np.isfinite(g).all()):
        raise NumericalFailure(f"non-finite plan (eps={eps})")
    return TransportPlan(
        gamma=gamma,
        dual_f=f,
        dual_g=g,
        iters_run=it,
        marginal_residual=marginal_residual(gamma, p.marginals),
        mode_used="plain",
        epsilon=eps,
    )


def _eps_schedule(eps, cost_max, max_iter, factor=0.5, stage_iters=10):
    """Warm-up regularizations above ``eps`` and iterations per stage."""
    start = max(cost_max, eps)
    stages = []
    e = start
    while e > eps * (1 + 1e-12):
        stages.append(e)
        e *= factor
    # warm-up never takes more than half of the budget
    per_stage = min(stage_iters, (max_iter // 2) // max(len(stages), 1))
    if per_stage == 0:
        return [], 0
    return stages, per_stage


class _LogStepper:
    """One log-domain Sinkhorn sweep, processed in cache-sized column blocks.

    Row potentials of a block only need the old column potentials, so each
    block updates ``f`` and immediately folds its contribution into a running
    log-sum-exp for the column update. The result equals the unblocked
    sweep up to the choice of stabilizing shift.
    """

    def __init__(self, Ct, log_mu, log_nu, block):
        self.Ct = Ct
        self.log_mu, self.log_nu = log_mu, log_nu
        m, n = Ct.shape
        self.block = min(block, n)
        self.Z = np.empty((m, self.block))
        self.row_buf = np.empty(self.block)
        self.col_max = np.empty(m)
        self.col_sum = np.empty(m)

    def __call__(self, e, f, g):
        Ct, Z = self.Ct, self.Z
        n = Ct.shape[1]
        f_new = np.empty(n)
        col_max = np.full(Ct.shape[0], -np.inf)
        col_sum = np.zeros(Ct.shape[0])
        inv = -1.0 / e
        for lo in range(0, n, self.block):
            hi = min(lo + self.block, n)
            Cb, Zb, rb = Ct[:, lo:hi], Z[:, : hi - lo], self.row_buf[: hi - lo]
            # rows: f_i = e*log(mu_i) - e*logsumexp_j((g_j - C_ij) / e)
            np.subtract(Cb, g[:, None], out=Zb)
            zmin = Zb.min(axis=0)
            np.subtract(Zb, zmin, out=Zb)
            np.multiply(Zb, inv, out=Zb)
            np.exp(Zb, out=Zb)
            Zb.sum(axis=0, out=rb)
            np.log(rb, out=rb)
            fb = zmin - e * rb + e * self.log_mu[lo:hi]
            f_new[lo:hi] = fb
            # columns: accumulate logsumexp_i((f_i - C_ij) / e) block by block
            np.subtract(fb[None, :], Cb, out=Zb)
            np.multiply(Zb, 1.0 / e, out=Zb)
            bmax = Zb.max(axis=1)
            new_max = np.maximum(col_max, bmax)
            np.subtract(Zb, bmax[:, None], out=Zb)
            np.exp(Zb, out=Zb)
            col_sum = col_sum * np.exp(col_max - new_max) + Zb.sum(axis=1) * np.exp(bmax - new_max)
            col_max = new_max
        g_new = e * self.log_nu - e * (col_max + np.log(col_sum))
        return f_new, g_new


LOG_BLOCK = 16384
def sinkhorn_log(p: EotProblem, cfg: EotConfig) -> TransportPlan:
    """Log-domain Sinkhorn with soft-min potential updates.

    ``f = eps*log(mu) + softmin_row(C - g)`` then
    ``g = eps*log(nu) + softmin_col(C - f)``; the plan is
    ``exp((f + g - C) / eps)``. Every exponent is shifted by its extreme
    value so nothing overflows for any ``eps > 0``.
    """
    eps = cfg.epsilon
    # (m, n) layout keeps every block operation on contiguous rows
    Ct = np.ascontiguousarray(p.cost.T)
    mu, nu = p.marginals.mu, p.marginals.nu
    step = _LogStepper(Ct, np.log(mu), np.log(nu), LOG_BLOCK)
    f = np.zeros(p.n)
    g = np.zeros(p.m)

    def plan():
        return np.exp((f[None, :] + g[:, None] - Ct) / eps).T

    it = 0
    with np.errstate(under="ignore"):
        if cfg.eps_scaling:
            stages, per_stage = _eps_schedule(eps, float(Ct.max()), cfg.max_iter)
            for e in stages:
                for _ in range(per_stage):
                    f, g = step(e, f, g)
                    it += 1

        newton_from = it + NEWTON_AFTER if cfg.newton and cfg.residual_tol is not None else math.inf
        log_mu = np.log(mu)
        while it < cfg.max_iter:
            if it >= newton_from:
                polished = _newton_step(Ct, log_mu, nu, g, eps)
                if polished is not None:
                    f, g = polished
                    it += 1
                    if _stopped(plan(), p.marginals, cfg.residual_tol):
                        break
                    continue
                newton_from = math.inf  # no progress: finish with plain sweeps
            g_prev = g
            f, g = step(eps, f, g)
            it += 1
            if cfg.stop_at_fixed_point and np.array_equal(g, g_prev):
                # exact fixed point: further iterations are no-ops
                break
            if cfg.residual_tol is not None and _stopped(plan(), p.marginals, cfg.residual_tol):
                break
        gamma = plan()
    if not np.isfinite(gamma).all():
        raise NumericalFailure(f"non-finite log-domain plan (eps={eps})")
    return TransportPlan(
        gamma=np.ascontiguousarray(gamma),
        dual_f=f,
        dual_g=g,
        iters_run=it,
        marginal_residual=marginal_residual(gamma, p.marginals),
        mode_used="log",
        epsilon=eps,
    )


def solve_eot(p: EotProblem, cfg: EotConfig = EotConfig()) -> TransportPlan:
    """Dispatch on ``cfg.mode``.

    ``auto`` runs the plain solver when ``eps > 1e-2`` and falls back to the
    log-domain solver if that fails; smaller ``eps`` goes straight to log.
    """
    if cfg.mode == "plain":
        return sinkhorn_plain(p, cfg)
    if cfg.mode == "log":
        return sinkhorn_log(p, cfg)
    if cfg.epsilon > PLAIN_EPS_THRESHOLD:
        try:
            return sinkhorn_plain(p, cfg)
        except NumericalFailure as exc:
            logger.info("plain Sinkhorn failed (%s); re-computing in log domain", exc)
    return sinkhorn_log(p, cfg)


def _sort_order(x):
    return np.argsort(np.asarray(x, dtype=float), kind="stable")


def exact_topk_plan(x, k) -> TransportPlan:
    """Closed-form unregularized plan: the ``k`` smallest scores go to anchor 0.

    Ties are broken by original index.
    """
    x = np.asarray(x, dtype=float)
    if not np.isfinite(x).all():
        raise SoftTopkError("exact_topk_plan needs finite scores")
    n = x.size
    k = _check_k(k, n)
    gamma = np.zeros((n, 2))
    order = _sort_order(x)
    gamma[order[:k], 0] = 1.0 / n
    gamma[order[k:], 1] = 1.0 / n
    nu = np.array([k / n, (n - k) / n])
    marg = Marginals(np.full(n, 1.0 / n), nu)
    return TransportPlan(gamma, None, None, 0, marginal_residual(gamma, marg), mode_used="exact")


def _vertex_count(n, k, sorted_):
    return math.perm(n, k) if sorted_ else math.comb(n, k)


def exact_ot_bruteforce(p: EotProblem) -> TransportPlan:
    """Minimize ``<C, G>`` over all vertices of the transport polytope.

    Every vertex puts mass ``1/n`` on one anchor per source. For top-k that
    is a choice of ``k`` rows for anchor 0; for sorted top-k an ordered choice
    of ``k`` rows for anchors ``0..k-1``. Enumeration is lexicographic and
    only strict improvements replace the incumbent, so ties resolve to the
    lexicographically smallest support.
    """
    n, m, k = p.n, p.m, p.k
    if n > MAX_BRUTEFORCE_N:
        raise InstanceTooLarge(f"brute force limited to n <= {MAX_BRUTEFORCE_N}, got {n}")
    count = _vertex_count(n, k, p.sorted)
    if count > MAX_BRUTEFORCE_VERTICES:
        raise InstanceTooLarge(f"{count} vertices exceeds {MAX_BRUTEFORCE_VERTICES}")

    C = p.cost
    last = C[:, m - 1]
    base = last.sum()
    best_val, best = math.inf, None
    chooser = itertools.permutations if p.sorted else itertools.combinations
    scale = max(float(np.abs(C).max()), 1.0)
    for rows in chooser(range(n), k):
        idx = np.fromiter(rows, dtype=int, count=k)
        cols = np.arange(k) if p.sorted else np.zeros(k, dtype=int)
        val = base + (C[idx, cols] - last[idx]).sum()
        if val < best_val - 1e-12 * scale:
            best_val, best = val, (idx, cols)

    gamma = np.zeros((n, m))
    gamma[:, m - 1] = 1.0 / n
    idx, cols = best
    gamma[idx, m - 1] = 0.0
    gamma[idx, cols] = 1.0 / n
    return TransportPlan(
        gamma,
        None,
        None,
        0,
        marginal_residual(gamma, p.marginals),
        mode_used="exact",
        objective=float((C * gamma).sum()),
    )


def transport_cost(p: EotProblem, plan: TransportPlan) -> float:
    """``<C, G>`` on the problem's (possibly normalized) cost."""
    return float((p.cost * plan.gamma).sum())
