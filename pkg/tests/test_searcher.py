import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pvnas.planted import PlantedObjective, evaluations_to_hit, random_search_cost
from pvnas.search_space import GENES, OPTIONS, Genotype, SearchSpace, encode_many, random_genotype
from pvnas.searcher import (BudgetExhausted, InsufficientData, SearchConfig, SurrogateEnsemble, dominates,
                            fit_surrogate, generate_candidates, hypervolume, initial_population,
                            mobananas_search, non_dominated_sort, pareto_front, random_search, select_top,
                            surrogate_targets, thompson_select)
from pvnas.evaluator import EvalRecord

SMALL = SearchConfig(k_ini=6, k_p=4, k_m=3, k_l=4, T_max=6, surrogate_epochs=60, seed=3)


def peel_fronts(points):
    """O(n^2) oracle: repeatedly strip the points nobody remaining dominates."""
    rest = list(points)
    fronts = []
    while rest:
        front = [p for p in rest if not any(dominates(q[:2], p[:2]) for q in rest)]
        fronts.append(sorted(front))
        rest = [p for p in rest if p not in front]
    return fronts


def hv_grid(points, ref):
    """Hypervolume oracle: sum the elementary cells of the coordinate grid that some point covers."""
    pts = [p for p in points if p[0] <= ref[0] and p[1] <= ref[1]]
    xs = sorted({p[0] for p in pts} | {ref[0]})
    ys = sorted({p[1] for p in pts} | {ref[1]})
    area = 0.0
    for x0, x1 in zip(xs, xs[1:]):
        for y0, y1 in zip(ys, ys[1:]):
            if any(p[0] <= x0 and p[1] <= y0 for p in pts):
                area += (x1 - x0) * (y1 - y0)
    return area


def as_points(fronts):
    return [sorted(f) for f in fronts]


# --- dominance -----------------------------------------------------------------------------------

def test_dominance_basics():
    assert dominates((1, 1), (2, 2))
    assert dominates((1, 2), (1, 3))
    assert not dominates((1, 1), (1, 1))
    assert not dominates((1, 5), (2, 2))


def test_sort_example_two_fronts():
    pts = [(1.0, 5.0, "a"), (2.0, 2.0, "b"), (5.0, 1.0, "c"), (3.0, 3.0, "d")]
    fronts = non_dominated_sort(pts)
    assert [[p[2] for p in f] for f in fronts] == [["a", "b", "c"], ["d"]]


def test_sort_single_and_duplicates():
    assert non_dominated_sort([(1.0, 1.0, "a")]) == [[(1.0, 1.0, "a")]]
    fronts = non_dominated_sort([(1.0, 1.0, "a"), (1.0, 1.0, "b")])
    assert len(fronts) == 1 and len(fronts[0]) == 2
    assert non_dominated_sort([]) == []


def test_non_finite_errors_form_last_front():
    pts = [(math.inf, 1.0, "x"), (3.0, 9.0, "a"), (4.0, 10.0, "b")]
    fronts = non_dominated_sort(pts)
    assert [[p[2] for p in f] for f in fronts] == [["a"], ["b"], ["x"]]
    assert pareto_front(pts) == [(3.0, 9.0, "a")]


def test_front_ordered_by_error():
    rng = np.random.default_rng(0)
    pts = [(float(e), float(p), str(i)) for i, (e, p) in enumerate(rng.random((80, 2)))]
    for f in non_dominated_sort(pts):
        errs = [p[0] for p in f]
        assert errs == sorted(errs)


points = st.lists(st.tuples(st.integers(0, 8).map(float), st.integers(0, 8).map(float)),
                  min_size=1, max_size=40)


@settings(max_examples=300, deadline=None)
@given(points)
def test_sort_matches_oracle(raw):
    pts = [(e, p, f"k{i:03d}") for i, (e, p) in enumerate(raw)]
    assert as_points(non_dominated_sort(pts)) == peel_fronts(pts)


def test_sort_matches_oracle_large_random():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(1, 200))
        e = rng.integers(0, 30, n).astype(float)
        p = rng.integers(0, 30, n).astype(float)
        pts = [(e[i], p[i], f"k{i:03d}") for i in range(n)]
        assert as_points(non_dominated_sort(pts)) == peel_fronts(pts)


def test_select_top_takes_fronts_in_order():
    pts = [(1.0, 5.0, "a"), (2.0, 2.0, "b"), (5.0, 1.0, "c"), (3.0, 3.0, "d"), (4.0, 4.0, "e")]
    assert [p[2] for p in select_top(pts, 4)] == ["a", "b", "c", "d"]
    assert [p[2] for p in select_top(pts, 2)] == ["a", "b"]
    assert len(select_top(pts, 99)) == 5


@settings(max_examples=200, deadline=None)
@given(points, st.tuples(st.integers(4, 10).map(float), st.integers(4, 10).map(float)))
def test_hypervolume_matches_grid(raw, ref):
    assert hypervolume(raw, ref) == pytest.approx(hv_grid(raw, ref), abs=1e-9)


def test_hypervolume_example():
    assert hypervolume([(1, 3), (2, 2), (3, 1)], (4, 4)) == pytest.approx(6.0)
    assert hypervolume([], (1, 1)) == 0.0


# --- surrogate -----------------------------------------------------------------------------------

def test_surrogate_targets_replace_non_finite():
    rng = np.random.default_rng(0)
    gs = [random_genotype(rng) for _ in range(3)]
    recs = [EvalRecord(gs[0], 2.0, 10), EvalRecord(gs[1], math.inf, 10), EvalRecord(gs[2], 5.0, 10)]
    assert surrogate_targets(recs).tolist() == [2.0, 5.0, 5.0]
    with pytest.raises(InsufficientData):
        surrogate_targets(recs[:2])


def test_surrogate_fits_constant():
    rng = np.random.default_rng(1)
    gs = [random_genotype(rng) for _ in range(20)]
    recs = [EvalRecord(g, 3.0, 1) for g in gs]
    ens = fit_surrogate(recs, SearchConfig())
    new = [random_genotype(rng) for _ in range(10)]
    assert np.all(np.abs(ens.predict(encode_many(new)) - 3.0) <= 0.05 * 3.0)


def test_surrogate_learns_planted_errors():
    obj = PlantedObjective(seed=2)
    rng = np.random.default_rng(2)
    recs = obj.evaluate_many(initial_population(rng, 50, SearchSpace()))
    y = np.array([r.measured_error for r in recs])
    ens = fit_surrogate(recs, SearchConfig())
    pred = ens.predict(encode_many([r.genotype for r in recs]))
    assert np.mean(np.abs(pred - y)) < np.std(y)


def test_surrogate_deterministic_and_members_differ():
    obj = PlantedObjective(seed=4)
    recs = obj.evaluate_many(initial_population(np.random.default_rng(4), 30, SearchSpace()))
    x = encode_many([random_genotype(np.random.default_rng(9)) for _ in range(8)])
    a = fit_surrogate(recs, SMALL, seed=11).predict_all(x)
    b = fit_surrogate(recs, SMALL, seed=11).predict_all(x)
    assert np.array_equal(a, b)
    assert a.shape == (SMALL.ensemble_size, 8)
    assert not np.allclose(a[0], a[1])


def test_thompson_returns_all_when_few():
    ens = SurrogateEnsemble(2, 8, seed=0)
    gs = initial_population(np.random.default_rng(0), 3, SearchSpace())
    assert thompson_select(ens, gs, 5, np.random.default_rng(0), lambda g: 1) == gs


def test_thompson_constant_prediction_ranks_by_params():
    rng = np.random.default_rng(5)
    gs = initial_population(rng, 30, SearchSpace())
    class Flat:
        n_members = 3

        def predict_all(self, x):
            return np.ones((3, len(x)))
    ens = Flat()
    counts = {g: i for i, g in enumerate(gs)}     # distinct, so a constant error leaves a total order
    chosen = thompson_select(ens, gs, 4, np.random.default_rng(0), lambda g: counts[g])
    assert chosen == gs[:4]


def test_thompson_deterministic():
    obj = PlantedObjective(seed=6)
    recs = obj.evaluate_many(initial_population(np.random.default_rng(6), 20, SearchSpace()))
    ens = fit_surrogate(recs, SMALL)
    cands = initial_population(np.random.default_rng(60), 25, SearchSpace())
    a = thompson_select(ens, cands, 5, np.random.default_rng(1), obj.param_count)
    b = thompson_select(ens, cands, 5, np.random.default_rng(1), obj.param_count)
    assert a == b and len(a) == 5 and len(set(a)) == 5


# --- candidate generation -------------------------------------------------------------------------

def test_candidates_are_new_and_distinct():
    rng = np.random.default_rng(0)
    parents = initial_population(rng, 5, SearchSpace())
    seen = set(parents)
    out = generate_candidates(parents, SMALL, rng, lambda g: g in seen, SearchSpace())
    assert len(out) == len(set(out)) <= len(parents) * SMALL.k_m
    assert not seen & set(out)


def test_budget_exhausted_on_tiny_space():
    pins = {g: OPTIONS[g][0] for g in GENES if g != "fsm"}
    pins["fsm"] = OPTIONS["fsm"][:2]
    space = SearchSpace(pins)
    everything = list(space)
    assert len(everything) == 2
    with pytest.raises(BudgetExhausted):
        generate_candidates(everything, SMALL, np.random.default_rng(0), lambda g: True, space)
    obj = PlantedObjective(seed=0)
    res = mobananas_search(obj, SearchConfig(k_ini=2, k_l=2, T_max=5), space)
    assert res.exhausted and len(res.population) == 2 and obj.train_calls == 2


# --- the loop -------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def run():
    obj = PlantedObjective(seed=1)
    res = mobananas_search(obj, SMALL)
    return obj, res


def test_loop_evaluation_counts(run):
    obj, res = run
    assert len(res.population) == SMALL.budget
    assert [h["evaluations"] for h in res.history] == [SMALL.k_ini + t * SMALL.k_l for t in range(SMALL.T_max + 1)]


def test_loop_never_trains_twice(run):
    obj, res = run
    keys = [r.key for r in res.population]
    assert len(keys) == len(set(keys)) == obj.train_calls


def test_loop_monotone_history(run):
    _, res = run
    best = [h["best_error"] for h in res.history]
    hv = [h["hypervolume"] for h in res.history]
    assert all(b1 <= b0 for b0, b1 in zip(best, best[1:]))
    assert all(v1 >= v0 - 1e-12 for v0, v1 in zip(hv, hv[1:]))


def test_snapshot_front_matches_oracle(run):
    _, res = run
    for h in res.history:
        prefix = res.population[:h["evaluations"]]
        oracle = peel_fronts([(r.measured_error, r.param_count, r.key) for r in prefix])[0]
        assert sorted((e, p, k) for k, e, p in h["front"]) == oracle


def test_loop_deterministic(run):
    _, res = run
    again = mobananas_search(PlantedObjective(seed=1), SMALL)
    assert [r.key for r in again.population] == [r.key for r in res.population]
    assert again.history == res.history


def test_stop_predicate():
    obj = PlantedObjective(seed=2)
    res = mobananas_search(obj, SMALL, stop=lambda pop: len(pop) >= SMALL.k_ini + SMALL.k_l)
    assert res.stopped_early and len(res.population) == SMALL.k_ini + SMALL.k_l


def test_random_search_distinct():
    obj = PlantedObjective(seed=0)
    recs = random_search(obj, 40, seed=3)
    assert len({r.key for r in recs}) == 40 == obj.train_calls


def test_all_failed_initial_population_does_not_crash():
    class Failing(PlantedObjective):
        def error(self, g):
            return math.inf
    res = mobananas_search(Failing(seed=0), SearchConfig(k_ini=3, k_l=2, T_max=2, surrogate_epochs=5))
    assert len(res.population) == 7 and res.front == []


# --- planted objective -----------------------------------------------------------------------------

def test_planted_optimum_is_unique_minimum():
    obj = PlantedObjective(seed=3)
    assert obj.error(obj.optimum) == 1.0
    rng = np.random.default_rng(0)
    for _ in range(200):
        g = random_genotype(rng)
        assert g == obj.optimum or obj.error(g) > 1.0


def test_evaluations_to_hit():
    obj = PlantedObjective(seed=0)
    rng = np.random.default_rng(1)
    gs = initial_population(rng, 5, SearchSpace())
    recs = obj.evaluate_many(gs + [obj.optimum])
    assert evaluations_to_hit(recs, obj.optimum) == 6
    assert evaluations_to_hit(recs[:5], obj.optimum) is None


def test_random_search_cost_mean_matches_closed_form():
    """Each canonical class c with draw probability p_c precedes the target t with probability
    p_c / (p_c + p_t), so E[cost] = 1 + sum over c != t of that ratio."""
    raw = SearchSpace().raw_size()
    k = len(OPTIONS["fst"])
    n_nofilter = raw // len(OPTIONS["fsm"]) // k      # classes that absorb k raw draws each
    n_plain = raw - n_nofilter * k
    expected = 1 + (n_plain - 1) * 0.5 + n_nofilter * k / (k + 1)
    obj = PlantedObjective(seed=5)
    target = obj.optimum
    if target.fsm == "NoFilter":
        target = Genotype(**{**target.to_dict(), "fsm": OPTIONS["fsm"][1]})
    rng = np.random.default_rng(0)
    costs = np.array([random_search_cost(target, rng) for _ in range(40)])
    spread = SearchSpace().canonical_size() / math.sqrt(12) / math.sqrt(len(costs))
    assert abs(costs.mean() - expected) < 4 * spread
    assert costs.min() >= 1
