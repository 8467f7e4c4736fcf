"""Outcome-adaptive regularization of the propensity forest.

Step one scores every covariate by its AIR importance in a forest that
regresses the outcome on the treatment and all covariates. Step two turns
the normalized scores into per-feature penalties and grows the propensity
forest sequentially: a split on a feature outside the active set has its gain
multiplied by the penalty, and a feature joins the active set the moment one
of its splits is executed. The set is shared by all later nodes and trees.
"""
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _engine as E
from .data import Dataset, DataError
from .forest import (Design, Forest, ForestConfig, ImportanceVector, Tree,
                     air_importance, draw_rows, seed_key, tree_stream)

EPS_CLIP = 0.01

ENTRY_RULES = {"positive": E.RULE_POSITIVE, "dominant": E.RULE_DOMINANT,
               "parent": E.RULE_PARENT}


@dataclass(frozen=True)
class PenaltyConfig:
    """How importance becomes a penalty and how features enter the active set.

    ``entry_rule="positive"`` executes an outside-set split whenever it wins
    the node with a positive penalized gain. ``"dominant"`` additionally
    requires its penalized gain to beat the best split available from the
    active set at that node; otherwise that best in-set split is used.
    ``initial_set=False`` starts from an empty set (plain guided RRF).
    """

    gamma: float = 1.0
    lambda0: float = 0.0
    depth_exponent: bool = False
    entry_rule: str = "parent"
    initial_set: bool = True

    def validate(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.lambda0 <= 1.0:
            raise ValueError(f"lambda0 must lie in [0, 1], got {self.lambda0}")
        if self.entry_rule not in ENTRY_RULES:
            raise ValueError(f"entry_rule must be one of {sorted(ENTRY_RULES)}")


RRF_PENALTY = PenaltyConfig(entry_rule="positive", initial_set=False)


@dataclass
class FeatureSet:
    """Active feature set; members are only ever added.

    ``origin[j]`` is ``"initial"`` or ``"tree-b"`` for the tree that added j.
    """

    members: list = field(default_factory=list)
    origin: dict = field(default_factory=dict)

    def __contains__(self, j):
        return j in self.origin

    def __len__(self):
        return len(self.members)

    def add(self, j, origin):
        if j not in self.origin:
            self.members.append(int(j))
            self.origin[int(j)] = origin

    def mask(self, p):
        m = np.zeros(p, dtype=bool)
        m[self.members] = True
        return m

    def copy(self):
        return FeatureSet(list(self.members), dict(self.origin))


@dataclass
class PropensityFit:
    e_hat: np.ndarray
    forest: Forest
    final_feature_set: FeatureSet
    selected: np.ndarray
    penalty: np.ndarray
    fallback: bool = False
    clip_rate: float = 0.0

    def predict(self, x, eps=EPS_CLIP):
        return np.clip(self.forest.predict(x), eps, 1 - eps)


def penalty_vector(imp: ImportanceVector, cfg: PenaltyConfig = PenaltyConfig()):
    """lambda_j = (1 - gamma) * lambda0 + gamma * Imp*_j.

    Degenerate importance (no positive score) falls back to all ones.
    """
    cfg.validate()
    if imp.degenerate:
        warnings.warn("degenerate importance: penalty falls back to 1 for every feature",
                      RuntimeWarning, stacklevel=2)
        return np.ones(len(imp.normalized))
    lam = (1 - cfg.gamma) * cfg.lambda0 + cfg.gamma * imp.normalized
    return np.clip(lam, 0.0, 1.0)


def initial_feature_set(imp: ImportanceVector) -> FeatureSet:
    """Features whose raw (signed) importance is at least the mean raw importance."""
    raw = np.asarray(imp.raw, dtype=float)
    fs = FeatureSet()
    if len(raw) == 0:
        return fs
    # compare against the mean with a relative slack so exact ties survive rounding
    mean = raw.mean()
    slack = 1e-12 * max(1.0, np.abs(raw).max())
    for j in np.flatnonzero(raw >= mean - slack):
        fs.add(j, "initial")
    return fs


def regularized_gain(j, raw_gain, fs, lam, depth=1, cfg: PenaltyConfig = PenaltyConfig(),
                     imp_star=None):
    """Gain used to rank a split on feature ``j`` at a node of the given depth (root = 1)."""
    if j in fs:
        return raw_gain
    if cfg.depth_exponent:
        if imp_star is None:
            raise ValueError("depth_exponent needs the normalized importance")
        return imp_star[j] ** depth * raw_gain
    return lam[j] * raw_gain


def build_regularized_forest(x, y, lam, fs0: FeatureSet, config: ForestConfig,
                             cfg: PenaltyConfig = PenaltyConfig(), imp_star=None,
                             stream_tag=0):
    """Grow trees one after another under the regularized gain.

    Returns the forest and the final feature set. ``y`` is the target (the
    treatment for a propensity model).
    """
    cfg.validate()
    design = x if isinstance(x, Design) else Design(x)
    p = design.p
    config.validate(p)
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (p,):
        raise ValueError(f"penalty has length {lam.shape}, expected {p}")
    imp_star = lam if imp_star is None else np.asarray(imp_star, dtype=float)
    y = np.asarray(y, dtype=float)
    # same key as build_forest so unit penalties reproduce the plain forest
    key = seed_key(config.seed, 1, stream_tag)
    mtry = config.resolve_mtry(p)
    pool = np.arange(p, dtype=np.int64)
    in_fs = fs0.mask(p)
    entered = np.full(p, -1, dtype=np.int64)
    rule = ENTRY_RULES[cfg.entry_rule]
    depth_cap = -1 if config.max_depth is None else config.max_depth
    fs = fs0.copy()
    trees = []
    for b in range(config.num_trees):
        st = tree_stream(key, b)
        rows = draw_rows(st, design.n, config)
        out = E.grow_tree(design.xt, design.rk, design.uval, design.nuniq, design.tab, y,
                          rows, pool, mtry, config.min_node_size, depth_cap, st, rule, lam,
                          in_fs, cfg.depth_exponent, imp_star, b, entered)
        trees.append(Tree(*out))
        # the kernel records entries in place; mirror them in tree order
        for j in np.flatnonzero(entered == b):
            fs.add(j, f"tree-{b}")
    return Forest(trees, p), fs


def outcome_importance(data: Dataset, config: ForestConfig, stream_tag=0) -> ImportanceVector:
    """AIR importance of the covariates from a forest of Y on [D, X].

    The treatment column takes part in the forest; its entry is dropped and
    the remaining scores are renormalized over the covariates.
    """
    imp = air_importance(data.with_treatment(), data.y, config, stream_tag=stream_tag)
    return ImportanceVector.from_raw(imp.raw[1:])


def fit_propensity(data: Dataset, imp: ImportanceVector, config: ForestConfig,
                   cfg: PenaltyConfig = PenaltyConfig(), eps=EPS_CLIP, stream_tag=0,
                   design=None) -> PropensityFit:
    """Regularized propensity forest on the covariates of ``data``."""
    data.require_both_arms()
    lam = penalty_vector(imp, cfg)
    fs0 = initial_feature_set(imp) if cfg.initial_set else FeatureSet()
    if imp.degenerate and cfg.initial_set:
        fs0 = FeatureSet()
        for j in range(data.p):
            fs0.add(j, "initial")
    forest, fs = build_regularized_forest(design if design is not None else data.x, data.d,
                                          lam, fs0, config, cfg, imp.normalized,
                                          stream_tag=stream_tag)
    raw = forest.predict(data.x)
    e_hat = np.clip(raw, eps, 1 - eps)
    return PropensityFit(e_hat=e_hat, forest=forest, final_feature_set=fs,
                         selected=forest.used_features(), penalty=lam,
                         fallback=imp.degenerate,
                         clip_rate=float(np.mean((raw < eps) | (raw > 1 - eps))))


def fit_oarf(data: Dataset, fc_outcome: ForestConfig = ForestConfig(),
             fc_prop: ForestConfig = ForestConfig(),
             pc: PenaltyConfig = PenaltyConfig(), eps=EPS_CLIP):
    """Both steps on the same sample: importance, then the regularized propensity forest."""
    data.require_both_arms()
    if data.n < 2 * fc_outcome.min_node_size:
        raise DataError(f"n = {data.n} is below 2 * min_node_size = {2 * fc_outcome.min_node_size}")
    imp = outcome_importance(data, fc_outcome)
    return imp, fit_propensity(data, imp, fc_prop, pc, eps)


def with_seed(config: ForestConfig, seed) -> ForestConfig:
    return replace(config, seed=int(seed))
