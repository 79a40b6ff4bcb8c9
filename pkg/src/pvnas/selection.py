"""Feature selection on the training split: Pearson filtering and greedy mRMR."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import TimeSeriesFrame

THRESHOLDS = (0.3, 0.4, 0.5)


@dataclass(frozen=True)
class FeatureMask:
    keep: np.ndarray        # bool (D,)
    scores: np.ndarray      # float (D,)
    order: tuple[int, ...] = ()  # selection order for greedy methods, target excluded

    def __post_init__(self):
        if not np.any(self.keep):
            raise ValueError("a feature mask must keep at least one feature")

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.keep)

    @property
    def n_kept(self) -> int:
        return int(np.sum(self.keep))

    @classmethod
    def all(cls, n: int) -> "FeatureMask":
        return cls(np.ones(n, dtype=bool), np.ones(n))


def correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson r; zero when either side has no variance."""
    a = np.asarray(a, np.float64) - np.mean(a)
    b = np.asarray(b, np.float64) - np.mean(b)
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if den == 0.0 or not np.isfinite(den):
        return 0.0
    return float(np.clip(np.dot(a, b) / den, -1.0, 1.0))


def abs_corr_matrix(values: np.ndarray) -> np.ndarray:
    d = values.shape[1]
    out = np.eye(d)
    for i in range(d):
        for j in range(i + 1, d):
            out[i, j] = out[j, i] = abs(correlation(values[:, i], values[:, j]))
    return out


def pearson_select(train: TimeSeriesFrame, threshold: float) -> FeatureMask:
    y = train.target
    scores = np.array([abs(correlation(train.values[:, j], y)) for j in range(train.n_features)])
    scores[train.target_index] = 1.0
    keep = scores >= threshold
    keep[train.target_index] = True
    return FeatureMask(keep, scores)


def mrmr_select(train: TimeSeriesFrame, threshold: float) -> FeatureMask:
    """Greedy max-relevance min-redundancy selection.

    At each step the candidate maximizing |r(f, target)| minus its mean |r|
    with the already selected features is added, as long as that score stays
    at or above ``threshold``. Ties go to the lower column index.
    """
    c = abs_corr_matrix(train.values)
    t = train.target_index
    relevance = c[:, t]
    candidates = [j for j in range(train.n_features) if j != t]
    selected: list[int] = []
    scores = np.zeros(train.n_features)
    scores[t] = 1.0
    while candidates:
        if selected:
            step = relevance[candidates] - c[np.ix_(candidates, selected)].mean(axis=1)
        else:
            step = relevance[candidates].copy()
        for j, s in zip(candidates, step):
            scores[j] = s
        best = int(np.argmax(step))
        if step[best] < threshold:
            break
        selected.append(candidates.pop(best))
    keep = np.zeros(train.n_features, dtype=bool)
    keep[t] = True
    keep[selected] = True
    return FeatureMask(keep, scores, tuple(selected))


def select_features(method: str, train: TimeSeriesFrame, threshold: float) -> FeatureMask:
    if method == "NoFilter":
        return FeatureMask.all(train.n_features)
    if method == "Pearson":
        return pearson_select(train, threshold)
    if method == "mRMR":
        return mrmr_select(train, threshold)
    raise ValueError(f"unknown feature selection method {method!r}")
