"""Seeded experiment loops behind the ``grad-check``, ``bias-scan`` and ``bench`` commands.

Each function returns a list of ``(n, k, epsilon, metric, value)`` rows.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import replace

import numpy as np

from .backward import grad_check, vjp_soft_topk
from .ot_core import EotConfig
from .topk import bias_report, soft_topk, sorted_soft_topk

REPORT_HEADER = ("n", "k", "epsilon", "metric", "value")


def grad_check_rows(n, k, epsilons, seeds, cfg: EotConfig, *, sorted=False):
    rows = []
    for eps in epsilons:
        c = replace(cfg, epsilon=eps)
        errs, resid = [], []
        for seed in seeds:
            rng = np.random.default_rng(seed)
            x = rng.standard_normal(n)
            probe = rng.standard_normal((n, k) if sorted else n)
            probe /= np.linalg.norm(probe)
            rep = grad_check(x, k, c, probe, sorted=sorted)
            errs.append(rep.max_rel_err)
            resid.append(rep.marginal_residual)
        rows += [
            (n, k, eps, "max_rel_err", max(errs)),
            (n, k, eps, "median_rel_err", statistics.median(errs)),
            (n, k, eps, "max_marginal_residual", max(resid)),
            (n, k, eps, "instances", len(errs)),
        ]
    return rows


def bias_scan_rows(n, k, epsilons, trials, seed, cfg: EotConfig, *, min_gap=1e-3):
    """Bias-bound check on standard Gaussian scores.

    Instances whose top-k boundary gap is below ``min_gap`` are skipped.
    """
    rows = []
    for eps in epsilons:
        rng = np.random.default_rng(seed)
        c = replace(cfg, epsilon=eps)
        actual, bound, violations, skipped = [], [], 0, 0
        for _ in range(trials):
            x = rng.standard_normal(n)
            srt = np.sort(x)
            if srt[k] - srt[k - 1] < min_gap:
                skipped += 1
                continue
            rep = bias_report(x, k, c)
            actual.append(rep.actual)
            bound.append(rep.bound)
            violations += not rep.holds
        rows += [
            (n, k, eps, "mean_actual", float(np.mean(actual)) if actual else float("nan")),
            (n, k, eps, "mean_bound", float(np.mean(bound)) if bound else float("nan")),
            (n, k, eps, "violations", violations),
            (n, k, eps, "skipped", skipped),
        ]
    return rows


def time_forward_backward(n, k, cfg: EotConfig, repeats, seed=0, *, sorted=False):
    """Median wall times (seconds) of the forward pass and forward + backward."""
    x = np.random.default_rng(seed).standard_normal(n)
    op = sorted_soft_topk if sorted else soft_topk
    fwd, both, iters = [], [], 0
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = op(x, k, cfg)
        t1 = time.perf_counter()
        vjp_soft_topk(np.ones_like(out.a), out, cfg)
        t2 = time.perf_counter()
        fwd.append(t1 - t0)
        both.append(t2 - t0)
        iters = out.plan.iters_run
    return statistics.median(fwd), statistics.median(both), iters


def bench_rows(sizes, k, cfg: EotConfig, repeats, seed=0, *, sorted=False):
    rows = []
    prev = None
    for n in sizes:
        fwd, both, iters = time_forward_backward(n, k, cfg, repeats, seed, sorted=sorted)
        rows += [
            (n, k, cfg.epsilon, "forward_median_s", fwd),
            (n, k, cfg.epsilon, "forward_backward_median_s", both),
            (n, k, cfg.epsilon, "iters_run", iters),
        ]
        if prev is not None:
            rows.append((n, k, cfg.epsilon, "forward_backward_ratio_vs_prev", both / prev))
        prev = both
    return rows
