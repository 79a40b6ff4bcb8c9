"""Exhaustive mRMR oracle: enumerate every ordered subset and keep the one consistent with greedy selection."""
import itertools

import numpy as np


def _abs_r(a, b):
    a, b = a - a.mean(), b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return 0.0 if den == 0 else abs((a * b).sum() / den)


def mrmr_oracle(values, target, threshold):
    d = values.shape[1]
    cand = [j for j in range(d) if j != target]
    r = {(i, j): _abs_r(values[:, i], values[:, j]) for i in range(d) for j in range(d)}

    def score(f, chosen):
        red = np.mean([r[f, s] for s in chosen]) if chosen else 0.0
        return r[f, target] - red

    consistent = []
    for k in range(len(cand) + 1):
        for order in itertools.permutations(cand, k):
            ok = True
            for i, f in enumerate(order):
                rest = [c for c in cand if c not in order[:i]]
                best = max(score(c, order[:i]) for c in rest)
                if score(f, order[:i]) != best or best < threshold:
                    ok = False
                    break
            if not ok:
                continue
            rest = [c for c in cand if c not in order]
            if rest and max(score(c, order) for c in rest) >= threshold:
                continue
            consistent.append(order)
    return consistent
