"""A cheap stand-in for training: a separable error function with a known optimum.

Useful for measuring how quickly a search strategy locates the best genotype.
"""
from __future__ import annotations

import numpy as np

from .evaluator import EvalRecord
from .search_space import GENES, OPTIONS, SEGMENTS, Genotype, count_params, random_genotype


class PlantedObjective:
    """error(g) = 1 + sum over genes of a per-option penalty; the planted optimum pays none."""

    def __init__(self, seed: int = 0, t_in: int = 96, t_out: int = 24, n_features: int = 11):
        # independent of any search or baseline stream seeded with the same integer
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        self.optimum = random_genotype(rng)
        self.penalty: dict[str, dict] = {}
        for gene in GENES:
            weight = rng.uniform(0.5, 2.0)
            self.penalty[gene] = {
                opt: 0.0 if opt == getattr(self.optimum, gene) else weight * rng.uniform(0.2, 1.0)
                for opt in OPTIONS[gene]}
        self.shape = (t_in, t_out, n_features)
        self.cache: dict[str, EvalRecord] = {}
        self.train_calls = 0

    def error(self, g: Genotype) -> float:
        return 1.0 + sum(self.penalty[gene][getattr(g, gene)] for gene in GENES)

    def param_count(self, g: Genotype) -> int:
        return count_params(g, *self.shape)

    def __contains__(self, g: Genotype) -> bool:
        return g.key in self.cache

    def evaluate_many(self, genotypes) -> list[EvalRecord]:
        out = []
        for g in genotypes:
            if g.key not in self.cache:
                self.train_calls += 1
                self.cache[g.key] = EvalRecord(g, self.error(g), self.param_count(g))
            out.append(self.cache[g.key])
        return out

    def found(self, population) -> bool:
        return any(r.genotype == self.optimum for r in population)


def evaluations_to_hit(population, target: Genotype) -> int | None:
    for i, r in enumerate(population):
        if r.genotype == target:
            return i + 1
    return None


def random_search_cost(target: Genotype, rng: np.random.Generator, chunk: int = 1 << 16,
                       max_draws: int = 1 << 26) -> int:
    """Distinct genotypes uniform random search evaluates up to and including ``target``.

    Draws are generated in vectorized chunks; each is canonicalized (inert
    threshold reset when no filter is used) and reduced to a mixed-radix code.
    """
    radix = np.array(SEGMENTS, dtype=np.int64)
    place = np.concatenate([np.cumprod(radix[::-1])[::-1][1:], [1]])
    fsm, fst = GENES.index("fsm"), GENES.index("fst")
    tgt = np.array([OPTIONS[g].index(getattr(target, g)) for g in GENES], dtype=np.int64) @ place
    seen: np.ndarray = np.zeros(0, dtype=np.int64)
    drawn = 0
    while drawn < max_draws:
        idx = rng.integers(0, radix, size=(chunk, len(GENES)))
        idx[idx[:, fsm] == 0, fst] = 0
        codes = idx @ place
        hit = np.flatnonzero(codes == tgt)
        if hit.size:
            prefix = codes[:hit[0]]
            return int(np.union1d(seen, prefix).size) + (0 if tgt in seen else 1)
        seen = np.union1d(seen, codes)
        drawn += chunk
    raise RuntimeError("target not reached within max_draws")
