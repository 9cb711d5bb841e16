import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from gpdyn.data import synth_generate
from gpdyn.evaluation import (
    COMPARISON_HEADER,
    RMSE_HEADER,
    EvalConfig,
    PatientEvaluation,
    ar1_rmse,
    compare_algorithms,
    evaluate_cohort,
    median,
    median_table,
    persistence_forecast,
    persistence_rmse,
    select_instance,
    select_member,
    test_rmse as rmse_of,
    wilcoxon_rank_sum,
    write_comparisons_csv,
)
from gpdyn.model import StateSchema, parse
from gpdyn.moo import ParetoFront
from gpdyn.presets import RELAX_SCHEMA, persistence_model, relaxation_model
from gpdyn.simulator import ModelInstance, SegmentTooShortError, forecast

S1 = StateSchema.unit(("s1",))


def naive_rmse(instance, seg, target, h):
    sq = [(forecast(instance, seg, t, h)[target] - seg[t + h, target]) ** 2 for t in range(len(seg) - h)]
    return float(np.sqrt(np.mean(sq)))


def enumerate_p(xs, ys):
    """Independent exact two-sided p: enumerate every split of the pooled values."""
    pooled = list(xs) + list(ys)
    n = len(xs)
    expected = n * (len(pooled) + 1) / 2
    ranks = {v: r + 1 for r, v in enumerate(sorted(pooled))}
    observed = abs(sum(ranks[v] for v in xs) - expected)
    combos = list(itertools.combinations(range(1, len(pooled) + 1), n))
    return sum(abs(sum(c) - expected) >= observed - 1e-9 for c in combos) / len(combos)


# -- selection ---------------------------------------------------------------------------------


def test_select_member_examples():
    assert select_member([[0.2, 0.3]]) == 0
    assert select_member([[0.25, 0.25], [0.1, 0.2], [0.4, 0.5]]) == 1
    assert select_member([[0.5], [0.3], [0.9]]) == 1
    assert select_member([[0.2, 0.1], [0.1, 0.2], [0.0, 0.5]]) == 0


def test_select_instance_pools_runs():
    g = relaxation_model()
    fronts = [ParetoFront(np.array([[0.1], [0.2]]), np.zeros((2, 2))), ParetoFront(np.array([[0.3]]), np.zeros((1, 2)))]
    val = [np.array([[0.4, 0.1], [0.3, 0.3]]), np.array([[0.2, 0.1]])]
    inst = select_instance(g, fronts, val)
    assert inst.params == (0.3,)
    single = select_instance(g, fronts[0], val[0])
    assert single.params == (0.1,)


# -- RMSE --------------------------------------------------------------------------------------


def test_rmse_examples():
    inst = ModelInstance(relaxation_model(), (0.4,))
    from gpdyn.data import simulate

    seg = simulate(inst, np.array([0.3, 0.7]), 20)
    assert all(v < 1e-12 for v in rmse_of(inst, seg, (0, 1)).values())
    pers = ModelInstance(persistence_model(S1))
    assert rmse_of(pers, np.full((10, 1), 0.3), (0,)) == {(0, 1): 0.0, (0, 2): 0.0, (0, 3): 0.0}
    assert rmse_of(pers, np.array([[0.0], [1.0], [0.0]]), (0,), (1,)) == {(0, 1): 1.0}
    with pytest.raises(SegmentTooShortError):
        rmse_of(pers, np.zeros((3, 1)), (0,), (3,))


def test_rmse_matches_naive_loop():
    rng = np.random.default_rng(0)
    g = parse("s1(t+1) = s1(t) * g1 + s2(t) * (g2 - s1(t))\ns2(t+1) = s2(t) + g1 * g2 - s1(t)", RELAX_SCHEMA)
    for _ in range(20):
        inst = ModelInstance(g, rng.random(2))
        seg = rng.random((int(rng.integers(5, 25)), 2))
        got = rmse_of(inst, seg, (0, 1))
        for (target, h), value in got.items():
            assert value == pytest.approx(naive_rmse(inst, seg, target, h), rel=1e-12, abs=1e-15)


def test_rmse_does_not_look_ahead():
    rng = np.random.default_rng(1)
    inst = ModelInstance(relaxation_model(), (0.5,))
    seg = rng.random((15, 2))
    longer = np.vstack([seg, rng.random((5, 2))])
    for h in (1, 2, 3):
        sq = [(forecast(inst, longer, t, h)[0] - longer[t + h, 0]) ** 2 for t in range(len(seg) - h)]
        assert rmse_of(inst, seg, (0,), (h,))[(0, h)] == pytest.approx(np.sqrt(np.mean(sq)), rel=1e-13)


def test_persistence_forecast_examples():
    assert persistence_forecast(np.array([0.2, 0.4]), 1).tolist() == [0.2]
    with pytest.raises(SegmentTooShortError):
        persistence_forecast(np.array([0.2, 0.4]), 2)
    series = np.full(8, 0.7)
    assert np.all(persistence_forecast(series, 3) - series[3:] == 0)


def test_persistence_genotype_equals_baseline_bitwise():
    rng = np.random.default_rng(2)
    g = persistence_model(RELAX_SCHEMA)
    for _ in range(50):
        seg = rng.random((int(rng.integers(5, 30)), 2))
        model = rmse_of(ModelInstance(g), seg, (0, 1))
        assert model == persistence_rmse(seg, (0, 1))


def test_ar1_recovers_linear_process():
    x = np.empty(40)
    x[0] = 0.9
    for t in range(39):
        x[t + 1] = 0.1 + 0.7 * x[t]
    seg = np.column_stack([x, x])
    out = ar1_rmse(seg[:30], seg[30:], (0,))
    assert all(v < 1e-10 for v in out.values())


# -- tables --------------------------------------------------------------------------------------


def test_median_examples():
    assert median([0.1, 0.2, 0.9]) == 0.2
    assert median([0.1, 0.3]) == 0.2
    assert median([0.42]) == 0.42
    with pytest.raises(ValueError):
        median_table({("a", "in", "s", 1): []})


def test_table_csv(tmp_path):
    table = median_table({("m", "in", "s1", 1): [0.1, 0.3], ("m", "out", "s1", 1): [0.5]})
    assert table.rows[("m", "in", "s1", 1)] == (0.2, 2)
    path = tmp_path / "rmse_table.csv"
    table.write_csv(path, meta={"seed": 1})
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# ")
    rows = list(csv.reader(lines[1:]))
    assert rows[0] == RMSE_HEADER
    assert rows[1] == ["m", "in", "s1", "1", "0.2", "2"]


# -- rank-sum test -------------------------------------------------------------------------------


def test_wilcoxon_examples():
    r = wilcoxon_rank_sum([1, 2, 3], [4, 5, 6])
    assert r.exact and r.p_value == 0.1 and r.direction == "less"
    same = [0.2, 0.3, 0.3, 0.5, 0.8, 0.8, 0.9]
    r = wilcoxon_rank_sum(same, list(same))
    assert not r.exact and r.p_value >= 0.95


def test_wilcoxon_symmetry():
    rng = np.random.default_rng(3)
    for _ in range(100):
        xs, ys = rng.random(int(rng.integers(1, 15))), rng.random(int(rng.integers(1, 15)))
        a, b = wilcoxon_rank_sum(xs, ys), wilcoxon_rank_sum(ys, xs)
        assert a.p_value == pytest.approx(b.p_value, abs=1e-12)
        assert a.statistic + b.statistic == len(xs) * len(ys)
        flip = {"less": "greater", "greater": "less", "none": "none"}
        assert b.direction == flip[a.direction]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_exact_path_matches_enumeration_and_scipy(n1, n2, seed):
    if n1 + n2 > 12:
        return
    rng = np.random.default_rng(seed)
    xs, ys = rng.random(n1), rng.random(n2)
    r = wilcoxon_rank_sum(xs, ys)
    assert r.exact
    assert r.p_value == pytest.approx(enumerate_p(xs, ys), abs=1e-12)
    ref = stats.mannwhitneyu(xs, ys, alternative="two-sided", method="exact")
    assert r.p_value == pytest.approx(ref.pvalue, abs=1e-12)
    assert r.statistic == ref.statistic


def test_approximation_matches_scipy_with_ties():
    rng = np.random.default_rng(4)
    for _ in range(200):
        xs = np.round(rng.random(int(rng.integers(3, 25))), 1)
        ys = np.round(rng.random(int(rng.integers(3, 25))), 1)
        if len(np.unique(np.concatenate([xs, ys]))) == 1:
            continue
        r = wilcoxon_rank_sum(xs, ys)
        ref = stats.mannwhitneyu(xs, ys, alternative="two-sided", method="asymptotic", use_continuity=True)
        assert r.p_value == pytest.approx(ref.pvalue, abs=1e-10)


def test_exact_and_approximate_paths_agree():
    rng = np.random.default_rng(5)
    for _ in range(100):
        xs, ys = rng.random(6), rng.random(6)
        exact = wilcoxon_rank_sum(xs, ys)
        approx = wilcoxon_rank_sum(xs, ys, exact_limit=0)
        assert exact.exact and not approx.exact
        assert abs(exact.p_value - approx.p_value) <= 0.02


def test_wilcoxon_p_in_unit_interval():
    rng = np.random.default_rng(6)
    for _ in range(200):
        r = wilcoxon_rank_sum(rng.integers(0, 3, 10), rng.integers(0, 3, 7))
        assert 0.0 <= r.p_value <= 1.0
    with pytest.raises(ValueError):
        wilcoxon_rank_sum([], [1.0])


# -- cohort evaluation --------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cohorts():
    return (
        synth_generate(relaxation_model(), 6, 60, 0.02, seed=1),
        synth_generate(relaxation_model(), 4, 60, 0.02, seed=2),
    )


CFG = EvalConfig(nsga_pop=8, nsga_gen=5)


def test_persistence_genotype_matches_baseline(cohorts):
    res = evaluate_cohort(persistence_model(RELAX_SCHEMA), *cohorts[:1], RELAX_SCHEMA, cohorts[1], CFG, seed=0)
    for (alg, sample, target, h), values in res.table.raw.items():
        if alg == "model":
            assert values == res.table.raw[("persistence", sample, target, h)]
    assert len(res.comparisons) == 2 * 2 * 3
    assert all(c.p_value >= 0.95 for c in res.comparisons)
    assert {p.sample for p in res.patients} == {"in", "out"}


def test_evaluate_cohort_deterministic(cohorts):
    a = evaluate_cohort(relaxation_model(), cohorts[0], RELAX_SCHEMA, config=CFG, seed=3)
    b = evaluate_cohort(relaxation_model(), cohorts[0], RELAX_SCHEMA, config=CFG, seed=3)
    assert a.table.raw == b.table.raw
    assert a.comparisons == b.comparisons
    assert [p.to_dict() for p in a.patients] == [p.to_dict() for p in b.patients]


def test_evaluate_cohort_scores_selected_instance(cohorts):
    res = evaluate_cohort(relaxation_model(), cohorts[0], RELAX_SCHEMA, config=CFG, seed=4)
    for p, patient in zip(res.patients, cohorts[0]):
        inst = ModelInstance(relaxation_model(), p.params)
        assert p.rmse["model"]["s1"][1] == pytest.approx(naive_rmse(inst, patient.test, 0, 1), rel=1e-12)
        assert PatientEvaluation.from_dict(p.to_dict()) == p


def test_optional_ar1_baseline(cohorts):
    cfg = EvalConfig(nsga_pop=4, nsga_gen=2, baselines=("persistence", "ar1"))
    res = evaluate_cohort(persistence_model(RELAX_SCHEMA), cohorts[0], RELAX_SCHEMA, config=cfg, seed=0)
    algorithms = {key[0] for key in res.table.raw}
    assert algorithms == {"model", "persistence", "ar1"}
    assert {(c.algorithm_a, c.algorithm_b) for c in res.comparisons} == {("model", "ar1"), ("model", "persistence")}


def test_comparisons_csv(tmp_path):
    table = median_table({("m", "in", "s1", 1): [0.1, 0.2, 0.3], ("b", "in", "s1", 1): [0.4, 0.5, 0.6]})
    comps = compare_algorithms(table, "m")
    path = tmp_path / "comparisons.csv"
    write_comparisons_csv(path, comps)
    rows = list(csv.reader(path.read_text().splitlines()))
    assert rows[0] == COMPARISON_HEADER
    assert rows[1][:5] == ["m", "b", "in", "s1", "1"]
    assert float(rows[1][6]) == 0.1
