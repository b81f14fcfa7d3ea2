"""SOFT top-k: differentiable top-k and sorted top-k via entropic optimal transport."""

from .applications import (
    BeamMix,
    beam_backtrack,
    beam_step_mix,
    beam_tensor,
    knn_loss,
    knn_loss_grad,
    one_hot,
    topk_attention_weights,
)
from .backward import (
    GradCheckReport,
    chain_cost_to_scores,
    finite_diff_grad,
    grad_check,
    vjp_naive,
    vjp_plan_to_cost,
    vjp_soft_topk,
)
from .ot_core import (
    EotConfig,
    EotProblem,
    InstanceTooLarge,
    Marginals,
    NumericalFailure,
    SoftTopkError,
    TransportPlan,
    build_sorted_problem,
    build_topk_problem,
    exact_ot_bruteforce,
    exact_topk_plan,
    marginal_residual,
    mask_scores,
    sinkhorn_log,
    sinkhorn_plain,
    solve_eot,
    transport_cost,
)
from .topk import (
    BiasReport,
    SortedTopkOutput,
    TopkOutput,
    bias_bound,
    bias_report,
    hard_topk,
    soft_topk,
    sorted_soft_topk,
)

__all__ = [name for name in dir() if not name.startswith("_")]
