import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chartatlas.transport import (
    TransportError,
    assignment_cost,
    entropy,
    exact_assignment,
    plan_cost,
    project_to_permutation,
    sinkhorn,
    squared_distances,
)


def brute_min(C):
    n = len(C)
    best = min(itertools.permutations(range(n)), key=lambda p: sum(C[p[j], j] for j in range(n)))
    return np.array(best), sum(C[best[j], j] for j in range(n))


def brute_max_weight(P):
    n = len(P)
    return max(sum(P[p[j], j] for j in range(n)) for p in itertools.permutations(range(n)))


def marginal_error(P):
    return max(np.abs(P.sum(axis=0) - 1).max(), np.abs(P.sum(axis=1) - 1).max())


def test_single_entry():
    plan = sinkhorn([[5.0]])
    np.testing.assert_allclose(plan.plan, [[1.0]])
    assert plan_cost(plan, [[5.0]]) == pytest.approx(5.0)
    assert plan.converged


def test_two_by_two_goes_to_identity():
    C = np.array([[0.0, 1.0], [1.0, 0.0]])
    plan = sinkhorn(C, eps=0.01)
    np.testing.assert_allclose(plan.plan, np.eye(2), atol=1e-3)
    assert plan_cost(plan, C) < 1e-2
    np.testing.assert_array_equal(project_to_permutation(plan).perm, [0, 1])


@pytest.mark.parametrize("seed", range(10))
def test_four_by_four_matches_brute_force(seed):
    C = np.random.default_rng(seed).uniform(size=(4, 4))
    plan = sinkhorn(C, eps=1e-3)
    _, best = brute_min(C)
    assert abs(plan_cost(plan, C) - best) <= 0.01 * best
    assert plan.converged and marginal_error(plan.plan) < 1e-6


def test_rejects_bad_costs():
    with pytest.raises(TransportError):
        sinkhorn(np.zeros((2, 3)))
    with pytest.raises(TransportError):
        sinkhorn([[1.0, -1.0], [0.0, 1.0]])
    with pytest.raises(TransportError):
        sinkhorn([[1.0, np.nan], [0.0, 1.0]])
    with pytest.raises(TransportError):
        sinkhorn([[1.0]], eps=0.0)


def test_small_eps_does_not_overflow():
    C = np.random.default_rng(0).uniform(0, 50, size=(30, 30))
    plan = sinkhorn(C, eps=1e-4, max_iters=2000)
    assert np.all(np.isfinite(plan.plan))
    assert np.all(plan.plan >= 0)


def test_cost_shift_invariance():
    C = np.random.default_rng(3).uniform(size=(5, 5))
    a = sinkhorn(C, eps=0.05, tol=1e-12, max_iters=5000)
    b = sinkhorn(C + 0.7, eps=0.05, tol=1e-12, max_iters=5000)
    np.testing.assert_allclose(a.plan, b.plan, rtol=0, atol=1e-9)
    assert plan_cost(b, C + 0.7) == pytest.approx(plan_cost(a, C) + 0.7 * 5, abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_monotone_in_eps(seed):
    C = np.random.default_rng(seed).uniform(size=(5, 5))
    costs = [plan_cost(sinkhorn(C, eps=e, tol=1e-10, max_iters=2000), C) for e in (1, 0.1, 0.01, 0.001)]
    assert all(b <= a + 1e-9 for a, b in zip(costs, costs[1:]))
    _, best = brute_min(C)
    assert abs(costs[-1] - best) <= 0.01 * best


def test_warm_start_agrees_with_cold():
    rng = np.random.default_rng(4)
    C = rng.uniform(size=(40, 40))
    cold = sinkhorn(C, eps=0.01, tol=1e-9, max_iters=5000)
    warm = sinkhorn(C + rng.uniform(0, 1e-3, size=C.shape), eps=0.01, tol=1e-9, max_iters=5000, init=(cold.f, cold.g))
    assert warm.converged
    assert warm.iterations < cold.iterations
    # stale or malformed potentials fall back to a cold start
    bad = sinkhorn(C, eps=0.01, tol=1e-9, max_iters=5000, init=(np.zeros(3), np.zeros(3)))
    np.testing.assert_allclose(bad.plan, cold.plan, atol=1e-8)


def test_exact_assignment_small_cases():
    a = exact_assignment([[1.0, 2.0], [2.0, 1.0]])
    np.testing.assert_array_equal(a.perm, [0, 1])
    assert a.cost == 2.0
    target = np.array([2, 0, 3, 1])
    C = np.ones((4, 4))
    C[target, np.arange(4)] = 0.0
    a = exact_assignment(C)
    np.testing.assert_array_equal(a.perm, target)
    assert a.cost == 0.0
    np.testing.assert_array_equal(a.perm[a.inverse()], np.arange(4))


@pytest.mark.parametrize("seed", range(10))
def test_exact_assignment_six_by_six(seed):
    C = np.random.default_rng(seed).uniform(size=(6, 6))
    a = exact_assignment(C)
    _, best = brute_min(C)
    assert a.cost == pytest.approx(best, abs=1e-12)
    assert assignment_cost(C, a.perm) == pytest.approx(a.cost, abs=1e-15)


def test_entropy_closed_forms():
    assert entropy(np.eye(4)[[2, 0, 3, 1]]) == 0.0
    n = 5
    assert entropy(np.full((n, n), 1 / n)) == pytest.approx(n * np.log(n))
    assert entropy(np.full((2, 2), 0.5)) == pytest.approx(2 * np.log(2), abs=1e-4)
    with pytest.raises(TransportError):
        entropy([[-0.1, 1.1], [1.1, -0.1]])


def test_projection_distinct_row_maxima():
    P = np.array([[0.1, 0.7, 0.2], [0.6, 0.1, 0.3], [0.3, 0.2, 0.5]])
    # row 0 -> col 1, row 1 -> col 0, row 2 -> col 2
    np.testing.assert_array_equal(project_to_permutation(P).perm, [1, 0, 2])


@pytest.mark.parametrize("seed", range(20))
def test_projection_collisions_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    P = rng.uniform(size=(5, 5))
    P[:, 0] += 2.0  # every row's max sits in column 0
    a = project_to_permutation(P)
    assert sorted(a.perm) == list(range(5))
    assert a.cost == pytest.approx(brute_max_weight(P), abs=1e-12)


def test_projection_negligible_entries_break_ties_by_cost():
    # rows 0 and 1 collide on column 0; rows 2 and 3 only see mass far below
    # the resolution of the matched sum, so any pairing of them is a tie
    P = np.array([
        [0.6, 0.4, 0.0, 0.0],
        [0.55, 0.45, 0.0, 0.0],
        [0.0, 0.0, 1e-200, 1e-300],
        [0.0, 0.0, 1e-250, 1e-210],
    ])
    C = np.ones((4, 4))
    C[2, 3] = C[3, 2] = 0.0
    by_cost = project_to_permutation(P, cost=C)
    by_log = project_to_permutation(P)
    assert by_cost.cost == by_log.cost == pytest.approx(brute_max_weight(P), abs=1e-12)
    np.testing.assert_array_equal(by_cost.perm, [0, 1, 3, 2])
    np.testing.assert_array_equal(by_log.perm, [0, 1, 2, 3])


def test_plan_cost_closed_forms():
    rng = np.random.default_rng(5)
    C = rng.uniform(size=(6, 6))
    assert plan_cost(np.eye(6), C) == pytest.approx(np.trace(C))
    assert plan_cost(np.full((6, 6), 1 / 6), C) == pytest.approx(C.mean() * 6)
    P = rng.uniform(size=(6, 6))
    naive = sum(P[i, j] * C[i, j] for i in range(6) for j in range(6))
    assert plan_cost(P, C) == pytest.approx(naive, abs=1e-12)


def test_squared_distances_orientation():
    x = np.array([[0.0, 0, 0], [1, 0, 0]])
    y = np.array([[0.0, 2, 0], [1, 0, 0], [0, 0, 0]])
    C = squared_distances(x, y)
    assert C.shape == (2, 3)
    np.testing.assert_array_equal(C, [[4, 1, 0], [5, 0, 1]])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_random_costs_stay_bistochastic(n, seed):
    C = np.random.default_rng(seed).uniform(size=(n, n))
    plan = sinkhorn(C, eps=1e-3, tol=1e-6)
    assert plan.converged
    assert marginal_error(plan.plan) < 1e-6
    _, best = brute_min(C)
    assert abs(plan_cost(plan, C) - best) <= 0.01 * best
