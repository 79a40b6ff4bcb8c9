"""Multi-objective Bayesian architecture search over (measured error, parameter count).

A population of evaluated genotypes is ranked by non-dominated sorting; the
best ranks spawn mutants, a surrogate ensemble scores them, Thompson sampling
picks the next batch to train.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .search_space import (ENCODING_LENGTH, FULL_SPACE, Genotype, SearchSpace, encode_many, mutate,
                           random_genotype)


class InsufficientData(ValueError):
    pass


class BudgetExhausted(RuntimeError):
    """No unevaluated genotype could be generated."""


@dataclass(frozen=True)
class SearchConfig:
    k_ini: int = 10
    k_p: int = 10
    k_m: int = 5
    k_l: int = 10
    T_max: int = 120
    p_m: float = 0.2
    ensemble_size: int = 5
    seed: int = 0
    surrogate_hidden: int = 64
    surrogate_epochs: int = 200
    surrogate_lr: float = 0.01
    retries: int = 20

    def __post_init__(self):
        for name in ("k_ini", "k_p", "k_m", "k_l", "T_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.p_m <= 1.0:
            raise ValueError("p_m must lie in [0, 1]")
        if self.ensemble_size < 2:
            raise ValueError("ensemble_size must be >= 2")

    @property
    def budget(self) -> int:
        return self.k_ini + self.T_max * self.k_l


# --- dominance ---------------------------------------------------------------------------

def _objectives(r) -> tuple[float, float, str]:
    if isinstance(r, tuple):
        return float(r[0]), float(r[1]), str(r[2]) if len(r) > 2 else ""
    return float(r.measured_error), float(r.param_count), r.key


def dominates(a: tuple[float, float], b: tuple[float, float]) -> bool:
    """a dominates b: no worse in both objectives and strictly better in one."""
    return a[0] <= b[0] and a[1] <= b[1] and (a[0] < b[0] or a[1] < b[1])


def non_dominated_sort(records: Sequence) -> list[list]:
    """Partition into successive fronts (both objectives minimized).

    Accepts EvalRecords or (error, params[, key]) tuples. Within a front the
    order is ascending error, then params, then key. Records with non-finite
    error form one final front.
    """
    items = [(_objectives(r), r) for r in records]
    finite = sorted((it for it in items if math.isfinite(it[0][0])), key=lambda it: it[0])
    rest = sorted((it for it in items if not math.isfinite(it[0][0])),
                  key=lambda it: (it[0][1], it[0][2]))
    fronts: list[list] = []
    # per front: smallest params seen, and the smallest error among members holding it
    front_min: list[tuple[float, float]] = []
    for (err, params, _), r in finite:
        for k, (min_p, err_at_min) in enumerate(front_min):
            # members come earlier in (error, params) order, so they have error <= err
            if min_p < params or (min_p == params and err_at_min < err):
                continue
            fronts[k].append(r)
            if params < min_p:
                front_min[k] = (params, err)
            break
        else:
            fronts.append([r])
            front_min.append((params, err))
    if rest:
        fronts.append([r for _, r in rest])
    return fronts


def pareto_front(records: Sequence) -> list:
    fronts = non_dominated_sort([r for r in records if math.isfinite(_objectives(r)[0])])
    return fronts[0] if fronts else []


def select_top(records: Sequence, k: int) -> list:
    """First k records in front order."""
    out = []
    for front in non_dominated_sort(records):
        out.extend(front[:k - len(out)])
        if len(out) >= k:
            break
    return out


def hypervolume(points: Sequence[tuple[float, float]], ref: tuple[float, float]) -> float:
    """Area dominated by ``points`` and bounded by the reference point (2-D, minimization)."""
    pts = sorted((e, p) for e, p in points if math.isfinite(e) and e <= ref[0] and p <= ref[1])
    area, best_p = 0.0, ref[1]
    for e, p in pts:
        if p < best_p:
            area += (ref[0] - e) * (best_p - p)
            best_p = p
    return area


# --- surrogate ----------------------------------------------------------------------------

class SurrogateEnsemble:
    """Independently initialized two-hidden-layer regressors trained jointly as one batched net.

    Each member maps a one-hot genotype encoding to a predicted measured error.
    All member weights live in one flat buffer so an optimizer step is a few vector ops.
    """

    def __init__(self, n_members: int, hidden: int = 64, n_in: int = ENCODING_LENGTH, seed: int = 0):
        rng = np.random.default_rng(seed)
        M, H = n_members, hidden
        shapes = {"w1": (n_in, M, H), "b1": (M, H), "w2": (M, H, H), "b2": (M, 1, H),
                  "w3": (M, H, 1), "b3": (M, 1, 1)}
        fans = {"w1": n_in, "b1": n_in, "w2": H, "b2": H, "w3": H, "b3": H}
        sizes = [int(np.prod(v)) for v in shapes.values()]
        self.flat = np.empty(sum(sizes))
        self.params: dict[str, np.ndarray] = {}
        off = 0
        for (name, shape), size in zip(shapes.items(), sizes):
            bound = 1.0 / math.sqrt(fans[name])
            self.flat[off:off + size] = rng.uniform(-bound, bound, size)
            self.params[name] = self.flat[off:off + size].reshape(shape)
            off += size
        self.n_members, self.hidden = M, H
        self.y_mean, self.y_std = 0.0, 1.0

    def _forward(self, x: np.ndarray):
        p, M, H = self.params, self.n_members, self.hidden
        z1 = (x @ p["w1"].reshape(x.shape[1], M * H)).reshape(-1, M, H) + p["b1"]
        h1 = np.maximum(z1, 0.0).transpose(1, 0, 2)                    # (M, n, H)
        h2 = np.maximum(h1 @ p["w2"] + p["b2"], 0.0)
        out = (h2 @ p["w3"] + p["b3"])[..., 0]                           # (M, n)
        return out, (h1, h2)

    def fit(self, x: np.ndarray, y: np.ndarray, epochs: int, lr: float) -> "SurrogateEnsemble":
        """Full-batch Adam on mean squared error of standardized targets."""
        x = np.asarray(x, np.float64)
        y = np.asarray(y, np.float64)
        self.y_mean = float(y.mean())
        sd = float(y.std())
        self.y_std = sd if sd > 1e-12 else 1.0
        t = (y - self.y_mean) / self.y_std
        n, M, H = len(y), self.n_members, self.hidden
        p = self.params
        grad = np.empty_like(self.flat)
        g = {}
        off = 0
        for name, v in p.items():
            g[name] = grad[off:off + v.size].reshape(v.shape)
            off += v.size
        m = np.zeros_like(self.flat)
        v = np.zeros_like(self.flat)
        b1, b2, eps = 0.9, 0.999, 1e-8
        for step in range(1, epochs + 1):
            out, (h1, h2) = self._forward(x)
            d3 = ((2.0 / n) * (out - t))[..., None]                      # (M, n, 1)
            np.matmul(h2.transpose(0, 2, 1), d3, out=g["w3"])
            g["b3"][...] = d3.sum(axis=1, keepdims=True)
            dh2 = (d3 @ p["w3"].transpose(0, 2, 1)) * (h2 > 0)
            np.matmul(h1.transpose(0, 2, 1), dh2, out=g["w2"])
            g["b2"][...] = dh2.sum(axis=1, keepdims=True)
            dh1 = ((dh2 @ p["w2"].transpose(0, 2, 1)) * (h1 > 0)).transpose(1, 0, 2)   # (n, M, H)
            g["w1"][...] = (x.T @ dh1.reshape(n, M * H)).reshape(g["w1"].shape)
            g["b1"][...] = dh1.sum(axis=0)
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            self.flat -= (lr / (1.0 - b1 ** step)) * m / (np.sqrt(v / (1.0 - b2 ** step)) + eps)
        return self

    def predict_all(self, x: np.ndarray) -> np.ndarray:
        """(members, n) predictions in target units."""
        out, _ = self._forward(np.asarray(x, np.float64))
        return out * self.y_std + self.y_mean

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.predict_all(x).mean(axis=0)


def surrogate_targets(records: Sequence) -> np.ndarray:
    """Measured errors with non-finite entries replaced by the worst finite one."""
    err = np.array([r.measured_error for r in records], np.float64)
    finite = np.isfinite(err)
    if finite.sum() < 2:
        raise InsufficientData(f"need at least 2 records with finite error, have {int(finite.sum())}")
    err[~finite] = err[finite].max()
    return err


def fit_surrogate(records: Sequence, cfg: SearchConfig, seed: int | None = None) -> SurrogateEnsemble:
    y = surrogate_targets(records)
    x = encode_many([r.genotype for r in records])
    ens = SurrogateEnsemble(cfg.ensemble_size, cfg.surrogate_hidden, seed=cfg.seed if seed is None else seed)
    return ens.fit(x, y, cfg.surrogate_epochs, cfg.surrogate_lr)


def thompson_select(ensemble: SurrogateEnsemble, candidates: Sequence[Genotype], k_l: int,
                    rng: np.random.Generator, param_count: Callable[[Genotype], int]) -> list[Genotype]:
    """Sample one member per candidate, then rank (sampled error, exact params) by dominance."""
    if len(candidates) <= k_l:
        return list(candidates)
    preds = ensemble.predict_all(encode_many(list(candidates)))
    member = rng.integers(ensemble.n_members, size=len(candidates))
    sampled = preds[member, np.arange(len(candidates))]
    pts = [(float(s), float(param_count(g)), g.key, i) for i, (s, g) in enumerate(zip(sampled, candidates))]
    return [candidates[p[3]] for p in select_top(pts, k_l)]


# --- the search loop ----------------------------------------------------------------------------

class EvaluatorLike(Protocol):
    def evaluate_many(self, genotypes: Sequence[Genotype]) -> list: ...
    def param_count(self, g: Genotype) -> int: ...
    def __contains__(self, g: Genotype) -> bool: ...


@dataclass
class SearchResult:
    front: list
    population: list
    history: list[dict]
    exhausted: bool = False
    stopped_early: bool = False

    @property
    def best(self):
        return min(self.population, key=lambda r: (r.measured_error, r.param_count, r.key))


def _snapshot(iteration: int, population: list) -> dict:
    finite = [r for r in population if math.isfinite(r.measured_error)]
    front = pareto_front(finite)
    if finite:
        ref = (max(r.measured_error for r in finite), max(r.param_count for r in finite))
        hv = hypervolume([(r.measured_error, r.param_count) for r in front], ref)
        best = min(r.measured_error for r in finite)
    else:
        hv, best = 0.0, math.inf
    return {
        "iteration": iteration,
        "evaluations": len(population),
        "best_error": best if math.isfinite(best) else None,
        "hypervolume": hv,
        "front": [[r.key, r.measured_error, r.param_count] for r in front],
    }


def initial_population(rng: np.random.Generator, k: int, space: SearchSpace,
                       max_draws: int = 10000) -> list[Genotype]:
    out, seen = [], set()
    for _ in range(max_draws):
        if len(out) >= k:
            break
        g = random_genotype(rng, space)
        if g not in seen:
            seen.add(g)
            out.append(g)
    return out


def generate_candidates(parents: Sequence[Genotype], cfg: SearchConfig, rng: np.random.Generator,
                        evaluated: Callable[[Genotype], bool], space: SearchSpace) -> list[Genotype]:
    """k_m mutants per parent; duplicates are re-mutated up to cfg.retries times, then dropped."""
    out, seen = [], set()
    for parent in parents:
        for _ in range(cfg.k_m):
            for _ in range(cfg.retries + 1):
                child = mutate(parent, cfg.p_m, rng, space)
                if not evaluated(child) and child not in seen:
                    seen.add(child)
                    out.append(child)
                    break
    if not out:
        raise BudgetExhausted("no unevaluated genotype could be generated")
    return out


def mobananas_search(evaluator: EvaluatorLike, cfg: SearchConfig = SearchConfig(),
                     space: SearchSpace = FULL_SPACE,
                     on_iteration: Callable[[dict], None] | None = None,
                     stop: Callable[[list], bool] | None = None) -> SearchResult:
    rng = np.random.default_rng(cfg.seed)
    population = list(evaluator.evaluate_many(initial_population(rng, cfg.k_ini, space)))
    history = [_snapshot(0, population)]
    if on_iteration:
        on_iteration(history[-1])
    exhausted = stopped = False
    for t in range(1, cfg.T_max + 1):
        if stop is not None and stop(population):
            stopped = True
            break
        keys = {r.key for r in population}
        try:
            ensemble = fit_surrogate(population, cfg, seed=cfg.seed * 100003 + t)
        except InsufficientData:
            ensemble = None     # nothing to learn from yet: pick candidates uniformly
        parents = [r.genotype for r in select_top(population, cfg.k_p)]
        try:
            candidates = generate_candidates(
                parents, cfg, rng, lambda g: g.key in keys, space)
        except BudgetExhausted:
            exhausted = True
            break
        if ensemble is None:
            chosen = [candidates[i] for i in sorted(rng.permutation(len(candidates))[:cfg.k_l])]
        else:
            chosen = thompson_select(ensemble, candidates, cfg.k_l, rng, evaluator.param_count)
        population.extend(evaluator.evaluate_many(chosen))
        history.append(_snapshot(t, population))
        if on_iteration:
            on_iteration(history[-1])
    return SearchResult(pareto_front(population), population, history, exhausted,
                        stopped or (stop is not None and stop(population)))


def random_search(evaluator: EvaluatorLike, n: int, seed: int = 0,
                  space: SearchSpace = FULL_SPACE) -> list:
    """Baseline: n distinct uniformly drawn genotypes."""
    rng = np.random.default_rng(seed)
    return list(evaluator.evaluate_many(initial_population(rng, n, space, max_draws=100 * n)))
