import math

import numpy as np
import pytest

from softtopk.ot_core import EotConfig, SoftTopkError, build_sorted_problem, exact_ot_bruteforce
from softtopk.topk import bias_bound, bias_report, hard_topk, soft_topk, sorted_soft_topk

SEVEN = [0.4, 0.7, 2.3, 1.9, -0.2, 1.4, 0.1]
RAW1 = EotConfig(epsilon=1.0, normalize_cost=False)


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def test_seven_scores_membership():
    out = soft_topk(SEVEN, 5, EotConfig(epsilon=1e-3))
    np.testing.assert_allclose(out.a, [1, 1, 0, 0, 1, 1, 1], atol=0.01)


@pytest.mark.parametrize("eps", [0.5, 1.0, 2.0])
def test_two_point_closed_form(eps):
    out = soft_topk([0.0, 1.0], 1, EotConfig(epsilon=eps, normalize_cost=False))
    np.testing.assert_allclose(out.a, [sigmoid(1 / eps), sigmoid(-1 / eps)], atol=1e-8)


def test_two_point_at_unit_epsilon():
    np.testing.assert_allclose(soft_topk([0.0, 1.0], 1, RAW1).a, [0.7311, 0.2689], atol=1e-4)


def test_sum_is_k_and_entries_in_unit_interval():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 40))
        k = int(rng.integers(1, n))
        a = soft_topk(rng.standard_normal(n), k, EotConfig(epsilon=0.05, max_iter=2000)).a
        assert a.sum() == pytest.approx(k, abs=1e-6)
        assert a.min() >= 0 and a.max() <= 1 + 1e-9


def test_largest_selects_the_other_end():
    a_small = soft_topk(SEVEN, 2, EotConfig(epsilon=1e-3)).a
    a_large = soft_topk(SEVEN, 2, EotConfig(epsilon=1e-3), largest=True).a
    np.testing.assert_allclose(a_small, hard_topk(SEVEN, 2), atol=0.01)
    np.testing.assert_allclose(a_large, hard_topk(SEVEN, 2, largest=True), atol=0.01)
    np.testing.assert_allclose(a_large, [0, 0, 1, 1, 0, 0, 0], atol=0.01)


def test_masked_entries_excluded_from_largest():
    a = soft_topk([3.0, -np.inf, 5.0, 4.0], 2, EotConfig(epsilon=1e-3), largest=True).a
    np.testing.assert_allclose(a, [0, 0, 1, 1], atol=1e-3)


def test_sorted_seven_scores_ranks():
    out = sorted_soft_topk(SEVEN, 2, EotConfig(epsilon=1e-3))
    assert out.a.shape == (7, 2)
    assert int(np.argmax(out.a[:, 0])) == 4
    assert int(np.argmax(out.a[:, 1])) == 6


def test_sorted_two_points_reduces_to_topk():
    s = sorted_soft_topk([0.0, 1.0], 1, RAW1).a
    np.testing.assert_allclose(s[:, 0], soft_topk([0.0, 1.0], 1, RAW1).a, atol=1e-12)


def test_sorted_rounding_reproduces_bruteforce_support():
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 20:
        n = int(rng.integers(3, 9))
        x = rng.standard_normal(n)
        if np.diff(np.sort(x)).min() < 0.05:
            continue
        k = int(rng.integers(1, min(n, 4)))
        out = sorted_soft_topk(x, k, EotConfig(epsilon=1e-4))
        exact = exact_ot_bruteforce(build_sorted_problem(x, k)).gamma[:, :k] * n
        np.testing.assert_array_equal(np.round(out.a), exact)
        checked += 1


def test_hard_topk():
    np.testing.assert_array_equal(hard_topk(SEVEN, 5), [1, 1, 0, 0, 1, 1, 1])
    np.testing.assert_array_equal(hard_topk([0.0, 1.0], 1), [1, 0])
    np.testing.assert_array_equal(hard_topk([2.0, 2.0, 3.0], 1), [1, 0, 0])
    with pytest.raises(SoftTopkError):
        hard_topk([1.0, 2.0], 2)


def test_bias_bound_value_seven_scores():
    assert bias_bound(1e-3, 7, 0.5) == pytest.approx(1e-3 * math.log(14) / 3.5)
    assert bias_bound(1e-3, 7, 0.5) == pytest.approx(7.54e-4, abs=1e-6)


def test_bias_report_seven_scores_holds():
    for cfg in (EotConfig(epsilon=1e-3, normalize_cost=False), EotConfig(epsilon=1e-3)):
        rep = bias_report(SEVEN, 5, cfg)
        assert rep.gap == pytest.approx(0.5)
        assert rep.holds, rep
    raw = bias_report(SEVEN, 5, EotConfig(epsilon=1e-3, normalize_cost=False))
    assert raw.bound == pytest.approx(7.54e-4, abs=1e-6)
    assert raw.effective_epsilon == 1e-3


def test_bias_bound_linear_in_epsilon():
    assert bias_bound(2e-2, 50, 0.1) == pytest.approx(2 * bias_bound(1e-2, 50, 0.1))


def test_bias_near_zero_gap_flags():
    rep = bias_report([0.0, 1e-9], 1, EotConfig(epsilon=1e-2))
    assert rep.bound > 1e5
    tie = bias_report([1.0, 1.0, 2.0], 1, EotConfig(epsilon=1e-2))
    assert not tie.defined and not tie.holds and math.isinf(tie.bound)


def test_bias_report_rejects_masked():
    with pytest.raises(SoftTopkError):
        bias_report([1.0, -np.inf, 2.0], 1)
