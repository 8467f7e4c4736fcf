"""Regression trees, bagged forests and impurity-corrected (AIR) importance.

Trees are grown by exact CART search on the SSE criterion: every midpoint
between consecutive distinct values of a candidate column is scored by the
decrease ``SSE(parent) - SSE(left) - SSE(right)``. Binary targets are fitted
the same way, so a leaf mean is a class-1 probability.
"""
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import _engine as E


class Split(NamedTuple):
    feature: int
    threshold: float
    gain: float


class Leaf(NamedTuple):
    value: float
    count: int


class Internal(NamedTuple):
    split: Split
    left: int
    right: int


@dataclass(frozen=True)
class ForestConfig:
    """Hyper-parameters of a bagged CART forest.

    ``mtry=None`` means ``ceil(sqrt(p))``; ``max_depth=None`` is unlimited.
    ``sample_fraction`` scales the number of rows drawn per tree and
    ``replace`` switches between bootstrap and subsampling.
    """

    num_trees: int = 500
    mtry: Optional[int] = None
    min_node_size: int = 10
    max_depth: Optional[int] = None
    seed: int = 0
    sample_fraction: float = 1.0
    replace: bool = True

    def resolve_mtry(self, p):
        mtry = self.mtry if self.mtry is not None else math.ceil(math.sqrt(p))
        return max(1, min(mtry, p))

    def validate(self, p):
        if self.num_trees < 1:
            raise ValueError("num_trees must be >= 1")
        if self.mtry is not None and not 1 <= self.mtry <= p:
            raise ValueError(f"mtry must lie in [1, {p}], got {self.mtry}")
        if self.min_node_size < 2:
            raise ValueError("min_node_size must be >= 2")
        if not 0 < self.sample_fraction <= 1 or (not self.replace and self.sample_fraction > 1):
            raise ValueError("sample_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class ImportanceVector:
    """AIR scores: ``raw`` (signed), ``clipped`` at zero, ``normalized`` by the max."""

    raw: np.ndarray
    clipped: np.ndarray
    normalized: np.ndarray
    degenerate: bool

    @classmethod
    def from_raw(cls, raw):
        raw = np.asarray(raw, dtype=float)
        clipped = np.maximum(raw, 0.0)
        top = clipped.max() if len(clipped) else 0.0
        if top > 0:
            return cls(raw, clipped, clipped / top, False)
        return cls(raw, clipped, np.zeros_like(clipped), True)


def seed_key(seed, *tags):
    """Deterministic 64-bit key for a named sub-stream of ``seed``."""
    ss = np.random.SeedSequence([int(seed) & (2**63 - 1), *[int(t) for t in tags]])
    return int(ss.generate_state(1, np.uint64)[0])


def tree_stream(key, b):
    return E.new_stream(np.uint64((key + b * 0x9E3779B97F4A7C15) & (2**64 - 1)))


def n_threads():
    try:
        return max(1, int(os.environ.get("OARF_THREADS", "1")))
    except ValueError:
        return 1


class Design:
    """Rank-encoded, feature-major view of a covariate matrix."""

    def __init__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2:
            raise ValueError("design matrix must be 2-D")
        self.n, self.p = x.shape
        self.xt = np.ascontiguousarray(x.T)
        self.rk, self.uval, self.nuniq = E.rank_encode(self.xt)
        self.tab = np.arange(self.p, dtype=np.int64)


class Tree:
    """One fitted tree in array form; node 0 is the root."""

    def __init__(self, feature, threshold, left, right, value, gain, count, depth):
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.value = value
        self.gain = gain
        self.count = count
        self.depth = depth
        for a in (feature, threshold, left, right, value, gain, count, depth):
            a.flags.writeable = False

    def __len__(self):
        return len(self.feature)

    def is_leaf(self, i):
        return self.feature[i] < 0

    def node(self, i):
        if self.feature[i] < 0:
            return Leaf(float(self.value[i]), int(self.count[i]))
        split = Split(int(self.feature[i]), float(self.threshold[i]), float(self.gain[i]))
        return Internal(split, int(self.left[i]), int(self.right[i]))

    def splits(self):
        return [self.node(i).split for i in range(len(self)) if self.feature[i] >= 0]

    def apply(self, x):
        """Leaf index reached by each row of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty(len(x), dtype=np.int64)
        for r, row in enumerate(x):
            i = 0
            while self.feature[i] >= 0:
                i = self.left[i] if row[self.feature[i]] < self.threshold[i] else self.right[i]
            out[r] = i
        return out

    def predict(self, x):
        return self.value[self.apply(x)]


class Forest:
    """Immutable bagged ensemble; prediction averages leaf values over trees."""

    def __init__(self, trees, n_features):
        if not trees:
            raise ValueError("a forest needs at least one tree")
        self.trees = tuple(trees)
        self.n_features = n_features
        sizes = np.array([len(t) for t in trees])
        self._roots = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self._feature = np.concatenate([t.feature for t in trees])
        self._threshold = np.concatenate([t.threshold for t in trees])
        self._left = np.concatenate([t.left for t in trees])
        self._right = np.concatenate([t.right for t in trees])
        self._value = np.concatenate([t.value for t in trees])
        self._gain = np.concatenate([t.gain for t in trees])

    @property
    def num_trees(self):
        return len(self.trees)

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} columns, got {x.shape[1]}")
        return E.predict_flat(np.ascontiguousarray(x), self._feature, self._threshold,
                              self._left, self._right, self._value, self._roots)

    def used_features(self):
        """Boolean mask of features appearing in at least one split."""
        mask = np.zeros(self.n_features, dtype=bool)
        f = self._feature[self._feature >= 0]
        mask[f[f < self.n_features]] = True
        return mask

    def gain_by_feature(self):
        """Total split gain per feature, averaged over trees."""
        out = np.zeros(self.n_features)
        internal = self._feature >= 0
        np.add.at(out, self._feature[internal], self._gain[internal])
        return out / self.num_trees

    def same_structure(self, other):
        return (self.num_trees == other.num_trees
                and np.array_equal(self._feature, other._feature)
                and np.array_equal(self._threshold, other._threshold)
                and np.array_equal(self._value, other._value))


def _tree_from(out):
    return Tree(*out)


def draw_rows(stream, n, config):
    size = max(1, int(round(config.sample_fraction * n)))
    return E.bootstrap_rows(stream, n, size, config.replace)


def best_split(rows, candidates, x, y) -> Optional[Split]:
    """Exhaustive best split of ``rows`` over the ``candidates`` columns of ``x``.

    Returns None when no split has strictly positive gain.
    """
    design = x if isinstance(x, Design) else Design(x)
    rows = np.asarray(rows, dtype=np.int64)
    cands = np.asarray(sorted(candidates), dtype=np.int64)
    if len(rows) < 2 or len(cands) == 0:
        return None
    f, t, g = E.best_split_exact(design.xt, design.rk, design.uval, design.nuniq,
                                 design.tab, np.asarray(y, dtype=float), rows, cands)
    if f < 0:
        return None
    return Split(int(f), float(t), float(g))


def build_tree(x, y, config, rows, stream, pool=None) -> Tree:
    """Grow a plain CART tree on the row multiset ``rows``.

    ``stream`` is an engine stream (see :func:`tree_stream`); it is advanced
    by the candidate draws, so the same stream state reproduces the tree.
    """
    design = x if isinstance(x, Design) else Design(x)
    pool = np.arange(design.p, dtype=np.int64) if pool is None else np.asarray(pool, dtype=np.int64)
    mtry = config.resolve_mtry(len(pool))
    ones = np.ones(design.p)
    out = E.grow_tree(design.xt, design.rk, design.uval, design.nuniq, design.tab,
                      np.asarray(y, dtype=float), np.asarray(rows, dtype=np.int64), pool,
                      mtry, config.min_node_size,
                      -1 if config.max_depth is None else config.max_depth,
                      stream, E.RULE_PLAIN, ones, np.zeros(design.p, dtype=np.bool_),
                      False, ones, 0, np.full(design.p, -1, dtype=np.int64))
    return _tree_from(out)


def build_forest(x, y, config: ForestConfig, stream_tag=0) -> Forest:
    """Bagged forest of plain CART trees; trees are independent and may run in threads."""
    design = x if isinstance(x, Design) else Design(x)
    config.validate(design.p)
    y = np.asarray(y, dtype=float)
    key = seed_key(config.seed, 1, stream_tag)

    def one(b):
        st = tree_stream(key, b)
        rows = draw_rows(st, design.n, config)
        return build_tree(design, y, config, rows, st)

    threads = n_threads()
    if threads > 1 and config.num_trees > 1:
        with ThreadPoolExecutor(threads) as pool:
            trees = list(pool.map(one, range(config.num_trees)))
    else:
        trees = [one(b) for b in range(config.num_trees)]
    return Forest(trees, design.p)


def air_importance(x, y, config: ForestConfig, stream_tag=0) -> ImportanceVector:
    """Actual impurity reduction of each column of ``x`` for predicting ``y``.

    Every tree sees ``2p`` columns: the originals plus an independently
    row-permuted shadow of each, redrawn per tree. ``mtry`` (resolved from
    the original ``p``) is drawn from all ``2p`` columns. Gains on column j
    count positively and gains on its shadow negatively; the per-tree sums
    are averaged over trees.
    """
    design = x if isinstance(x, Design) else Design(x)
    p, n = design.p, design.n
    config.validate(p)
    if n < 2 * config.min_node_size:
        raise ValueError(f"air_importance needs n >= {2 * config.min_node_size}, got {n}")
    y = np.asarray(y, dtype=float)
    key = seed_key(config.seed, 2, stream_tag)
    mtry = config.resolve_mtry(p)
    pool = np.arange(2 * p, dtype=np.int64)
    tab = np.concatenate([design.tab, design.tab])
    ones = np.ones(2 * p)
    depth_cap = -1 if config.max_depth is None else config.max_depth

    def one(b):
        st = tree_stream(key, b)
        rows = draw_rows(st, n, config)
        aug, ark = E.shadow_design(design.xt, design.rk, st)
        out = E.grow_tree(aug, ark, design.uval, design.nuniq, tab, y, rows, pool, mtry,
                          config.min_node_size, depth_cap, st, E.RULE_PLAIN, ones,
                          np.zeros(2 * p, dtype=np.bool_), False, ones, b,
                          np.full(2 * p, -1, dtype=np.int64))
        return E.signed_gain_sum(out[0], out[5], p)

    threads = n_threads()
    if threads > 1 and config.num_trees > 1:
        with ThreadPoolExecutor(threads) as ex:
            per_tree = list(ex.map(one, range(config.num_trees)))
    else:
        per_tree = [one(b) for b in range(config.num_trees)]
    raw = np.sum(per_tree, axis=0) / config.num_trees
    imp = ImportanceVector.from_raw(raw)
    if imp.degenerate:
        warnings.warn("all AIR importances are <= 0; normalized importance is all zero",
                      RuntimeWarning, stacklevel=2)
    return imp
