import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpdyn.moo import (
    EvaluationError,
    Nsga2,
    crowding_distance,
    dominated_hypervolume,
    dominates,
    non_dominated_sort,
    nsga2_run,
    polynomial_mutation,
    sbx_crossover,
)


def brute_force_fronts(points):
    """Peel fronts by checking every pair for dominance, one point at a time."""
    remaining = list(range(len(points)))
    fronts = []
    while remaining:
        front = []
        for i in remaining:
            if not any(dominates(points[j], points[i]) for j in remaining if j != i):
                front.append(i)
        fronts.append(sorted(front))
        remaining = [i for i in remaining if i not in front]
    return fronts


def monte_carlo_hv(points, samples, rng):
    u = rng.random((samples, points.shape[1]))
    covered = np.zeros(samples, bool)
    for p in points:
        covered |= np.all(u >= p, axis=1)
    return covered.mean()


def benchmark(x):
    x = np.asarray(x)[..., 0]
    return np.stack([x**2, (x - 1) ** 2], axis=-1)


# -- sorting -------------------------------------------------------------------------


def test_sort_examples():
    assert non_dominated_sort([(0.1, 0.9), (0.9, 0.1), (0.5, 0.5)]) == [[0, 1, 2]]
    assert non_dominated_sort([(0.2, 0.2), (0.3, 0.3)]) == [[0], [1]]
    assert non_dominated_sort([]) == []


def test_sort_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(100):
        n = int(rng.integers(1, 51))
        c = 2 + trial % 2
        pts = rng.random((n, c))
        if trial % 3 == 0:
            pts = np.round(pts, 1)  # ties and duplicates
        got = [sorted(f) for f in non_dominated_sort(pts)]
        assert got == brute_force_fronts(pts)


def test_duplicates_share_a_front():
    assert non_dominated_sort([(0.3, 0.3), (0.3, 0.3), (0.5, 0.5)]) == [[0, 1], [2]]


# -- crowding ------------------------------------------------------------------------------


def test_crowding_examples():
    assert crowding_distance([(0.5, 0.5)]).tolist() == [np.inf]
    assert crowding_distance([(0, 1), (1, 0)]).tolist() == [np.inf, np.inf]
    assert crowding_distance([(0, 1), (0.5, 0.5), (1, 0)]).tolist() == [np.inf, 2.0, np.inf]


def test_crowding_zero_range_objective():
    d = crowding_distance([(0.2, 0.5), (0.4, 0.5), (0.9, 0.5)])
    assert d[1] == pytest.approx((0.9 - 0.2) / 0.7)


# -- hypervolume ---------------------------------------------------------------------------


def test_hypervolume_examples():
    assert dominated_hypervolume(np.array([[0.0, 0.0]])) == 1.0
    assert abs(dominated_hypervolume(np.array([[0.2, 0.6], [0.5, 0.3]])) - 0.47) <= 1e-12
    assert dominated_hypervolume(np.zeros((0, 2))) == 0.0


def test_hypervolume_against_monte_carlo():
    rng = np.random.default_rng(1)
    for trial in range(50):
        c = 2 + trial % 2
        pts = rng.random((int(rng.integers(1, 11)), c))
        assert abs(dominated_hypervolume(pts) - monte_carlo_hv(pts, 200_000, rng)) < 0.01


def test_hypervolume_four_objectives_inclusion_exclusion():
    a = np.array([0.1, 0.5, 0.2, 0.4])
    b = np.array([0.4, 0.2, 0.3, 0.1])
    vol = lambda p: float(np.prod(1 - p))  # noqa: E731
    expected = vol(a) + vol(b) - vol(np.maximum(a, b))
    assert dominated_hypervolume(np.array([a, b])) == pytest.approx(expected, abs=1e-14)


def test_hypervolume_rejects_many_objectives():
    with pytest.raises(ValueError):
        dominated_hypervolume(np.zeros((1, 5)))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 3), st.integers(1, 8))
def test_hypervolume_invariants(seed, c, n):
    rng = np.random.default_rng(seed)
    pts = rng.random((n, c))
    hv = dominated_hypervolume(pts)
    assert 0.0 <= hv <= 1.0
    worse = np.minimum(pts[0] + rng.random(c) * (1 - pts[0]), 1.0)
    assert dominated_hypervolume(np.vstack([pts, worse])) == pytest.approx(hv, abs=1e-12)
    better = pts.copy()
    better[0, 0] *= rng.random()
    assert dominated_hypervolume(better) >= hv - 1e-12
    assert dominated_hypervolume(np.vstack([pts, pts[:1]])) == pytest.approx(hv, abs=1e-12)


# -- variation operators ---------------------------------------------------------------


def test_operators_respect_bounds():
    rng = np.random.default_rng(2)
    low, high = np.array([0.0, -1.0, 2.0]), np.array([1.0, 1.0, 2.5])
    a = low + rng.random((500, 3)) * (high - low)
    b = low + rng.random((500, 3)) * (high - low)
    c1, c2 = sbx_crossover(a, b, low, high, rng)
    m = polynomial_mutation(c1, low, high, rng, prob=1.0)
    for x in (c1, c2, m):
        assert np.all(x >= low) and np.all(x <= high)


def test_sbx_without_crossover_copies_parents():
    rng = np.random.default_rng(3)
    a, b = rng.random((10, 2)), rng.random((10, 2))
    c1, c2 = sbx_crossover(a, b, np.zeros(2), np.ones(2), rng, prob=0.0)
    assert np.array_equal(c1, a) and np.array_equal(c2, b)


# -- NSGA-II ------------------------------------------------------------------------------


def test_parameter_free_problem():
    front = nsga2_run(lambda x: np.array([0.3, 0.4]), 0, seed=0)
    assert len(front) == 1
    assert front.params.shape == (1, 0)
    assert front.errors.tolist() == [[0.3, 0.4]]


def test_nsga2_deterministic():
    a = nsga2_run(benchmark, 1, pop_size=20, generations=20, seed=5)
    b = nsga2_run(benchmark, 1, pop_size=20, generations=20, seed=5)
    assert np.array_equal(a.params, b.params) and np.array_equal(a.errors, b.errors)
    c = nsga2_run(benchmark, 1, pop_size=20, generations=20, seed=5, vectorized=True)
    assert np.array_equal(a.params, c.params)


def test_nsga2_front_is_non_dominated():
    front = nsga2_run(benchmark, 1, pop_size=20, generations=30, seed=1)
    assert non_dominated_sort(front.errors) == [list(range(len(front)))]


def test_nsga2_population_stays_in_bounds():
    rng = np.random.default_rng(4)
    bounds = [(0.2, 0.4), (-3.0, 3.0)]
    algo = Nsga2(2, bounds, 12, rng)
    for _ in range(30):
        x = algo.ask()
        assert np.all(x[..., 0] >= 0.2) and np.all(x[..., 0] <= 0.4)
        assert np.all(np.abs(x[..., 1]) <= 3.0)
        algo.tell(np.stack([x[..., 0] ** 2 + x[..., 1] ** 2, (x[..., 0] - 1) ** 2], axis=-1))


def test_batched_runs_are_independent():
    runs = [np.random.default_rng(s) for s in (10, 11)]
    algo = Nsga2(1, None, 10, runs)
    for _ in range(11):
        algo.tell(benchmark(algo.ask()))
    solo = Nsga2(1, None, 10, np.random.default_rng(11))
    for _ in range(11):
        solo.tell(benchmark(solo.ask()))
    assert np.array_equal(algo.front(1).params, solo.front(0).params)


def test_benchmark_reaches_best_attainable_front():
    # the exact front has area 1/6 under it, so no finite front beats HV 5/6;
    # the best 20-point set reaches 0.8175
    for seed in range(10):
        front = nsga2_run(benchmark, 1, pop_size=20, generations=50, seed=seed, vectorized=True)
        assert dominated_hypervolume(np.minimum(front.errors, 1.0)) >= 0.8175 - 0.02


def test_evaluation_failure_carries_params():
    def boom(x):
        raise ZeroDivisionError("bad")

    with pytest.raises(EvaluationError) as info:
        nsga2_run(boom, 2, pop_size=4, generations=1, seed=0)
    assert info.value.params.shape == (2,)
