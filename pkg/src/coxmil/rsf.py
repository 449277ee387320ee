"""Random survival forest: logrank splitting, Nelson-Aalen leaves, mortality scores."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .survcore import Cohort, nelson_aalen


@dataclass
class ForestConfig:
    n_trees: int = 100
    mtry: int | None = None  # default ceil(sqrt(p))
    min_node_events: int = 3
    min_node_size: int = 15
    max_depth: int | None = None
    bootstrap: bool = True
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")


@dataclass
class SurvivalTree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    split_stat: np.ndarray
    leaf_chf: np.ndarray  # (n_nodes, n_grid); rows of internal nodes unused

    def apply(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.intp)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            cur = node[idx]
            go_left = x[idx, self.feature[cur]] <= self.threshold[cur]
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[node] >= 0
        return node

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))


@dataclass
class Forest:
    trees: list[SurvivalTree]
    event_times: np.ndarray
    n_features: int
    config: ForestConfig = field(repr=False)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def mtry(self) -> int:
        return _mtry(self.config, self.n_features)


def _mtry(config: ForestConfig, p: int) -> int:
    m = config.mtry if config.mtry is not None else math.ceil(math.sqrt(p))
    if not 1 <= m <= p:
        raise ValueError(f"mtry must lie in [1, {p}], got {m}")
    return m


def _grow_tree(x, times, events, grid, config: ForestConfig, rng: np.random.Generator) -> SurvivalTree:
    n, p = x.shape
    mtry = _mtry(config, p)
    feature, threshold, left, right, stat_, chf = [], [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        stat_.append(0.0)
        chf.append(None)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        t, e = times[idx], events[idx]
        can_split = (e.sum() >= config.min_node_events and idx.size >= config.min_node_size
                     and (config.max_depth is None or depth < config.max_depth))
        best = (0.0, -1, np.nan)
        if can_split:
            ev_times = np.unique(t[e == 1])
            upto = np.searchsorted(ev_times, t, side="right")
            for j in rng.choice(p, size=mtry, replace=False):
                s, thr = kernels.logrank_best_split(x[idx, j], upto, e, ev_times.size)
                if s > best[0]:
                    best = (s, int(j), thr)
        if best[1] < 0:
            chf[node] = nelson_aalen(t, e, grid)[1]
            continue
        s, j, thr = best
        mask = x[idx, j] <= thr
        feature[node], threshold[node], stat_[node] = j, thr, s
        lnode, rnode = new_node(), new_node()
        left[node], right[node] = lnode, rnode
        stack.append((rnode, idx[~mask], depth + 1))
        stack.append((lnode, idx[mask], depth + 1))

    leaf_chf = np.zeros((len(feature), grid.size))
    for i, c in enumerate(chf):
        if c is not None:
            leaf_chf[i] = c
    return SurvivalTree(np.array(feature, dtype=np.intp), np.array(threshold, dtype=float),
                        np.array(left, dtype=np.intp), np.array(right, dtype=np.intp),
                        np.array(stat_, dtype=float), leaf_chf)


def fit_forest(cohort: Cohort | None = None, config: ForestConfig | None = None, *,
               covariates=None, times=None, events=None) -> Forest:
    """Grow ``n_trees`` logrank-split trees; tree ``b`` draws from RNG stream (seed, b).

    Records are put in a canonical order first so the fitted forest does not depend
    on the order of the training data.
    """
    config = config or ForestConfig()
    if cohort is not None:
        covariates, times, events = cohort.covariates, cohort.times, cohort.events
    x = np.atleast_2d(np.asarray(covariates, dtype=float))
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=np.int8)
    if events.sum() == 0:
        raise ValueError("cannot fit forest: no events")
    order = np.lexsort([*x.T[::-1], events, times])
    x, times, events = x[order], times[order], events[order]
    grid = np.unique(times[events == 1])
    n = times.size
    _mtry(config, x.shape[1])

    def grow(b):
        rng = np.random.default_rng([config.seed, b])
        idx = rng.integers(0, n, size=n) if config.bootstrap else np.arange(n)
        return _grow_tree(x[idx], times[idx], events[idx], grid, config, rng)

    if config.n_jobs > 1:
        with ThreadPoolExecutor(config.n_jobs) as pool:
            trees = list(pool.map(grow, range(config.n_trees)))
    else:
        trees = [grow(b) for b in range(config.n_trees)]
    return Forest(trees, grid, x.shape[1], config)


def ensemble_chf(forest: Forest, covariates) -> np.ndarray:
    x = np.atleast_2d(np.asarray(covariates, dtype=float))
    if x.shape[1] != forest.n_features:
        raise ValueError(f"covariates have {x.shape[1]} columns, forest expects {forest.n_features}")
    total = np.zeros((x.shape[0], forest.event_times.size))
    for tree in forest.trees:
        total += tree.leaf_chf[tree.apply(x)]
    return total / forest.n_trees


def predict_mortality(forest: Forest, covariates) -> np.ndarray:
    """Ensemble cumulative hazard summed over the training event times."""
    return ensemble_chf(forest, covariates).sum(axis=1)
