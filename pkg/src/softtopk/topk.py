"""SOFT top-k operators built on the entropic plans of :mod:`ot_core`.

Convention: "top-k" means the ``k`` *smallest* scores. Pass ``largest=True``
to select the largest ones (scores are negated after masking).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ot_core import (
    EotConfig,
    EotProblem,
    SoftTopkError,
    TransportPlan,
    build_sorted_problem,
    build_topk_problem,
    exact_topk_plan,
    solve_eot,
)


@dataclass(frozen=True)
class TopkOutput:
    a: np.ndarray
    plan: TransportPlan
    problem: EotProblem


@dataclass(frozen=True)
class SortedTopkOutput:
    """``a[i, l]`` is the smoothed indicator that score ``i`` has rank ``l``."""

    a: np.ndarray
    plan: TransportPlan
    problem: EotProblem


def soft_topk(x, k, cfg: EotConfig = EotConfig(), *, largest=False) -> TopkOutput:
    """Smoothed top-k indicator ``a = n * G[:, 0]``.

    Entries lie in ``[0, 1]`` and sum to ``k``; as ``epsilon -> 0`` they
    approach :func:`hard_topk`.

    >>> out = soft_topk([0.0, 1.0], 1, EotConfig(epsilon=1.0, normalize_cost=False))
    >>> out.a.round(4)
    array([0.7311, 0.2689])
    """
    problem = build_topk_problem(x, k, cfg, largest=largest)
    plan = solve_eot(problem, cfg)
    return TopkOutput(a=problem.n * plan.gamma[:, 0], plan=plan, problem=problem)


def sorted_soft_topk(x, k, cfg: EotConfig = EotConfig(), *, largest=False) -> SortedTopkOutput:
    """Smoothed rank-membership matrix ``a = n * G[:, :k]`` of shape ``(n, k)``.

    Column ``l`` concentrates on the ``(l+1)``-th smallest score.
    """
    problem = build_sorted_problem(x, k, cfg, largest=largest)
    plan = solve_eot(problem, cfg)
    return SortedTopkOutput(a=problem.n * plan.gamma[:, :k], plan=plan, problem=problem)


def hard_topk(x, k, *, largest=False) -> np.ndarray:
    """0/1 indicator of the ``k`` smallest (or largest) scores, ties to lower index."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if not 1 <= k < n:
        raise SoftTopkError(f"k must satisfy 1 <= k < n (n={n}), got {k}")
    key = -x if largest else x
    out = np.zeros(n)
    out[np.argsort(key, kind="stable")[:k]] = 1.0
    return out


@dataclass(frozen=True)
class BiasReport:
    """Distance of the entropic plan from the exact one versus its bound.

    ``gap`` is the spacing between the ``k``-th and ``(k+1)``-th smallest
    scores. ``bound`` is infinite when the gap is zero (``defined`` False).
    """

    bound: float
    actual: float
    gap: float
    effective_epsilon: float
    marginal_residual: float

    @property
    def defined(self) -> bool:
        return self.gap > 0

    @property
    def holds(self) -> bool:
        return self.defined and self.actual <= self.bound


def bias_bound(epsilon, n, gap) -> float:
    """``eps * (ln n + ln 2) / (n * gap)``; ``inf`` when ``gap <= 0``."""
    if gap <= 0:
        return math.inf
    return epsilon * (math.log(n) + math.log(2)) / (n * gap)


def bias_report(x, k, cfg: EotConfig = EotConfig(), *, largest=False) -> BiasReport:
    """Compare ``||G_eps - G*||_F`` with the bias bound for this instance.

    The bound is evaluated at the regularization seen by the *raw*
    squared-distance cost, ``epsilon * normalizer``, so it stays valid when
    the cost is normalized. Without normalization that is just ``epsilon``.
    """
    out = soft_topk(x, k, cfg, largest=largest)
    scores = out.problem.scores
    if out.problem.masked.any():
        raise SoftTopkError("bias_report needs finite scores")
    exact = exact_topk_plan(scores, k)
    srt = np.sort(scores)
    gap = float(srt[k] - srt[k - 1])
    eff = cfg.epsilon * out.problem.normalizer
    return BiasReport(
        bound=bias_bound(eff, scores.size, gap),
        actual=float(np.linalg.norm(out.plan.gamma - exact.gamma)),
        gap=gap,
        effective_epsilon=eff,
        marginal_residual=out.plan.marginal_residual,
    )
