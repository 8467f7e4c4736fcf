"""Treatment-effect estimators built on fitted propensity (and outcome) models.

All estimators are pure functions of (data, seed). Propensity "fitters" are
callables ``fitter(train: Dataset, seed) -> FoldModel`` whose ``predict``
returns probabilities for new covariate rows.
"""
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .adaptive import (EPS_CLIP, FeatureSet, PenaltyConfig, build_regularized_forest,
                       fit_propensity, initial_feature_set, outcome_importance,
                       penalty_vector)
from .data import Dataset, DataError
from .forest import ForestConfig, build_forest, seed_key


class EstimationError(RuntimeError):
    """An estimator could not produce a value (degenerate input or no convergence)."""


@dataclass
class AteEstimate:
    theta: float
    ci_lower: float = math.nan
    ci_upper: float = math.nan
    method: str = ""
    n_bootstrap: int = 0
    diagnostics: dict = field(default_factory=dict)
    selected: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.ci_lower > self.ci_upper:
            raise ValueError("ci_lower must not exceed ci_upper")


@dataclass
class FoldModel:
    """Fitted nuisance model of one fold; ``predict`` maps covariates to values."""

    predict: Callable
    selected: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)


# -- weighting ---------------------------------------------------------------

def ipt_weights(e_hat, d):
    """tau_i = D_i / e_i + (1 - D_i) / (1 - e_i)."""
    e_hat = np.asarray(e_hat, dtype=float)
    d = np.asarray(d, dtype=float)
    return d / e_hat + (1 - d) / (1 - e_hat)


def _check_propensity(e_hat, d):
    e_hat = np.asarray(e_hat, dtype=float)
    if np.any(~np.isfinite(e_hat)) or np.any(e_hat <= 0) or np.any(e_hat >= 1):
        raise EstimationError("propensities must lie strictly inside (0, 1); clip upstream")
    n1 = int(np.sum(d))
    if n1 == 0 or n1 == len(d):
        raise EstimationError("both treatment arms are required")
    return e_hat


def iptw_ate(e_hat, d, y):
    """Hajek (self-normalized) inverse-probability weighted effect estimate."""
    d = np.asarray(d, dtype=float)
    y = np.asarray(y, dtype=float)
    e_hat = _check_propensity(e_hat, d)
    w1 = d / e_hat
    w0 = (1 - d) / (1 - e_hat)
    return float(np.sum(w1 * y) / np.sum(w1) - np.sum(w0 * y) / np.sum(w0))


def weighted_ate(tau, d, y):
    """Hajek estimate from precomputed weights; invariant to rescaling ``tau``."""
    tau = np.asarray(tau, dtype=float)
    d = np.asarray(d, dtype=float)
    y = np.asarray(y, dtype=float)
    w1 = tau * d
    w0 = tau * (1 - d)
    return float(np.sum(w1 * y) / np.sum(w1) - np.sum(w0 * y) / np.sum(w0))


def wamd(data: Dataset, tau, coef_weights):
    """Weighted absolute mean difference of the covariates between arms."""
    tau = np.asarray(tau, dtype=float)
    coef_weights = np.asarray(coef_weights, dtype=float)
    if len(tau) != data.n or len(coef_weights) != data.p:
        raise ValueError("tau must have n entries and coef_weights p entries")
    w1 = tau * data.d
    w0 = tau * (1 - data.d)
    gap = w1 @ data.x / w1.sum() - w0 @ data.x / w0.sum()
    return float(np.sum(coef_weights * np.abs(gap)))


def percentile_interval(values, alpha=0.05):
    """Empirical alpha/2 and 1 - alpha/2 quantiles, linear interpolation."""
    values = np.asarray(values, dtype=float)
    lo, hi = np.quantile(values, [alpha / 2, 1 - alpha / 2], method="linear")
    return float(lo), float(hi)


# -- cross-fitting -----------------------------------------------------------

@dataclass
class CrossFitPlan:
    """Fold assignment for K-fold cross-fitting, stratified by treatment."""

    k: int
    fold_assignment: np.ndarray
    seed: int = 0

    @classmethod
    def make(cls, d, k=2, seed=0, groups=None):
        """Random folds balanced within each arm.

        Rows sharing a ``groups`` label (copies of one unit) share a fold.
        """
        d = np.asarray(d)
        if k < 2:
            raise ValueError("cross-fitting needs k >= 2")
        rng = np.random.default_rng(seed_key(seed, 21))
        if groups is None:
            labels, first = np.arange(len(d)), np.arange(len(d))
        else:
            _, first, labels = np.unique(groups, return_index=True, return_inverse=True)
        unit_d = d[first]
        unit_fold = np.empty(len(first), dtype=np.int64)
        offset = 0
        for arm in (0, 1):
            units = np.flatnonzero(unit_d == arm)
            units = units[rng.permutation(len(units))]
            unit_fold[units] = (np.arange(len(units)) + offset) % k
            offset += len(units)
        plan = cls(k, unit_fold[labels], seed)
        plan.validate(d)
        return plan

    def validate(self, d):
        d = np.asarray(d)
        if len(self.fold_assignment) != len(d):
            raise ValueError("fold assignment length differs from the data")
        for f in range(self.k):
            arms = d[self.fold_assignment == f]
            if len(arms) == 0 or arms.min() == arms.max():
                raise DataError(f"fold {f} lacks a treatment class")

    def folds(self):
        for f in range(self.k):
            yield np.flatnonzero(self.fold_assignment != f), np.flatnonzero(self.fold_assignment == f)


def cross_fit(data: Dataset, plan: CrossFitPlan, fitter, seed=0, eps=EPS_CLIP):
    """Average of per-fold IPTW estimates with out-of-fold propensities."""
    plan.validate(data.d)
    thetas, masks, e_all = [], [], np.empty(data.n)
    for f, (aux, est) in enumerate(plan.folds()):
        model = fitter(data.subset(aux), seed_key(seed, 31, f))
        e = np.clip(model.predict(data.x[est]), eps, 1 - eps)
        e_all[est] = e
        thetas.append(iptw_ate(e, data.d[est], data.y[est]))
        if model.selected is not None:
            masks.append(model.selected)
    selected = np.any(masks, axis=0) if masks else None
    theta = float(np.mean(thetas))
    diag = {"fold_estimates": thetas, "e_hat": e_all,
            "clip_rate": float(np.mean((e_all <= eps) | (e_all >= 1 - eps)))}
    return AteEstimate(theta, method="cross-fit", diagnostics=diag, selected=selected)


# -- bootstrap ---------------------------------------------------------------

def bootstrap_replicates(data: Dataset, pipeline, n_boot=500, seed=0, max_retries=10):
    """Rerun ``pipeline(data_b, seed_b) -> AteEstimate`` on row resamples."""
    if n_boot < 1:
        raise ValueError("n_boot must be >= 1")
    out = []
    for b in range(n_boot):
        rng = np.random.default_rng(seed_key(seed, 41, b))
        for _ in range(max_retries + 1):
            rows = rng.integers(0, data.n, data.n)
            n1 = data.d[rows].sum()
            if 0 < n1 < data.n:
                break
        else:
            raise DataError(f"bootstrap draw {b} lacked a treatment class after {max_retries} redraws")
        boot = data.subset(rows)
        boot.groups = rows if data.groups is None else data.groups[rows]
        out.append(pipeline(boot, seed_key(seed, 42, b)))
    return out


def bootstrap_ci(data: Dataset, pipeline, n_boot=500, alpha=0.05, seed=0):
    """Percentile interval of the pipeline's estimate over ``n_boot`` resamples."""
    if n_boot < 20:
        raise ValueError("n_boot must be >= 20")
    reps = bootstrap_replicates(data, pipeline, n_boot, seed)
    return percentile_interval([r.theta for r in reps], alpha)


def with_bootstrap(data, pipeline, n_boot, seed, alpha=0.05):
    """Point estimate plus percentile CI and bootstrap selection proportions."""
    est = pipeline(data, seed)
    reps = bootstrap_replicates(data, pipeline, n_boot, seed)
    lo, hi = percentile_interval([r.theta for r in reps], alpha)
    masks = [r.selected for r in reps if r.selected is not None]
    diag = dict(est.diagnostics)
    if masks:
        diag["bootstrap_inclusion"] = np.mean(masks, axis=0)
    return replace(est, ci_lower=lo, ci_upper=hi, n_bootstrap=n_boot, diagnostics=diag)


# -- OARF --------------------------------------------------------------------

@dataclass(frozen=True)
class OarfConfig:
    """Settings of the full OARF effect estimator.

    ``importance_sample="full"`` scores the covariates once on the whole
    sample; ``"auxiliary"`` rescoring inside each fold is kept for ablation.
    """

    outcome_forest: ForestConfig = ForestConfig()
    propensity_forest: ForestConfig = ForestConfig()
    penalty: PenaltyConfig = PenaltyConfig()
    k: int = 2
    eps: float = EPS_CLIP
    importance_sample: str = "full"


def _seeded(config: ForestConfig, seed, tag):
    return replace(config, seed=seed_key(seed, tag))


def oarf_fitter(imp, cfg: OarfConfig):
    """Propensity fitter using a fixed importance vector."""
    def fit(train: Dataset, seed):
        pf = fit_propensity(train, imp, _seeded(cfg.propensity_forest, seed, 52),
                            cfg.penalty, cfg.eps)
        return FoldModel(pf.predict, pf.selected,
                         {"feature_set": list(pf.final_feature_set.members)})
    return fit


def oarf_ate(data: Dataset, cfg: OarfConfig = OarfConfig(), seed=0) -> AteEstimate:
    """Outcome-adaptive random forest IPTW estimate with K-fold cross-fitting."""
    data.require_both_arms()
    fo = cfg.outcome_forest
    if data.n < 2 * fo.min_node_size:
        raise DataError(f"n = {data.n} is below 2 * min_node_size = {2 * fo.min_node_size}")
    plan = CrossFitPlan.make(data.d, cfg.k, seed, data.groups)
    if cfg.importance_sample == "full":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            imp = outcome_importance(data, _seeded(fo, seed, 51))
        fitter = oarf_fitter(imp, cfg)
    elif cfg.importance_sample == "auxiliary":
        imp = None

        def fitter(train, s):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                imp_f = outcome_importance(train, _seeded(fo, s, 51))
            return oarf_fitter(imp_f, cfg)(train, s)
    else:
        raise ValueError("importance_sample must be 'full' or 'auxiliary'")
    est = cross_fit(data, plan, fitter, seed, cfg.eps)
    diag = est.diagnostics
    if imp is not None:
        diag["importance"] = imp.normalized
        diag["degenerate_importance"] = imp.degenerate
        weights = imp.normalized
    else:
        weights = np.ones(data.p)
    diag["wamd"] = wamd(data, ipt_weights(diag["e_hat"], data.d), weights)
    return replace(est, method="oarf")


def forest_fitter(config: ForestConfig, eps=EPS_CLIP):
    """Plain probability forest on all covariates."""
    def fit(train: Dataset, seed):
        forest = build_forest(train.x, train.d, _seeded(config, seed, 53))
        return FoldModel(lambda x: np.clip(forest.predict(x), eps, 1 - eps),
                         forest.used_features())
    return fit


def rf_full_ate(data: Dataset, config: ForestConfig = ForestConfig(), seed=0, k=2,
                eps=EPS_CLIP) -> AteEstimate:
    plan = CrossFitPlan.make(data.d, k, seed, data.groups)
    return replace(cross_fit(data, plan, forest_fitter(config, eps), seed, eps), method="rf-full")


def tune_oarf(data: Dataset, grid, base: OarfConfig = OarfConfig(), seed=0):
    """Pick (mtry, min_node_size, num_trees) for the propensity forest by wAMD.

    Returns ``(best_triple, estimate, table)`` where ``table`` lists the
    wAMD of every grid point. Ties go to the smaller mtry, then node size.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("tuning grid is empty")
    rows = []
    for mtry, node_size, trees in grid:
        pf = replace(base.propensity_forest, mtry=mtry, min_node_size=node_size,
                     num_trees=trees)
        est = oarf_ate(data, replace(base, propensity_forest=pf), seed)
        rows.append(((mtry, node_size, trees), est.diagnostics["wamd"], est))
    best = min(rows, key=lambda r: (r[1], r[0][0], r[0][1], r[0][2]))
    return best[0], best[2], [(r[0], r[1]) for r in rows]


# -- logistic models ---------------------------------------------------------

def _standardize(x):
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    return (x - mu) / sd


def _sigmoid(z):
    return 0.5 * (1 + np.tanh(0.5 * z))


def logistic_mle(z, d, tol=1e-8, max_iter=100):
    """Damped Newton fit of ``d`` on ``[1, z]``; returns (coef, info)."""
    n, p = z.shape
    a = np.column_stack([np.ones(n), z])
    coef = np.zeros(p + 1)

    def nll(c):
        eta = a @ c
        return float(np.sum(np.logaddexp(0, eta) - d * eta))

    f = nll(coef)
    for it in range(1, max_iter + 1):
        mu = _sigmoid(a @ coef)
        grad = a.T @ (mu - d)
        if np.linalg.norm(grad) < tol:
            return coef, {"iterations": it - 1, "converged": True, "grad_norm": float(np.linalg.norm(grad))}
        h = (a * (mu * (1 - mu))[:, None]).T @ a
        h[np.diag_indices_from(h)] += 1e-8
        step = np.linalg.solve(h, grad)
        t = 1.0
        while t > 1e-10:
            cand = coef - t * step
            fc = nll(cand)
            if fc <= f + 1e-4 * t * (grad @ -step):
                break
            t *= 0.5
        coef, f_old, f = cand, f, fc
        if f_old - f < 1e-14 * max(1.0, abs(f)) and t <= 1e-10:
            break
    grad = a.T @ (_sigmoid(a @ coef) - d)
    return coef, {"iterations": max_iter, "converged": False, "grad_norm": float(np.linalg.norm(grad))}


def fit_logistic_ipw(data: Dataset, eps=EPS_CLIP) -> AteEstimate:
    """Logistic propensity model on all covariates, then clipped Hajek IPTW."""
    data.require_both_arms()
    z = _standardize(data.x)
    coef, info = logistic_mle(z, data.d)
    eta = coef[0] + z @ coef[1:]
    separated = bool(np.max(np.abs(eta)) > 30)
    if not info["converged"] and not separated:
        raise EstimationError(f"logistic regression did not converge: {info}")
    if separated:
        warnings.warn("treatment is (quasi-)separable; weights rely on clipping", RuntimeWarning)
    e = np.clip(_sigmoid(eta), eps, 1 - eps)
    diag = dict(info, separation=separated, e_hat=e,
                clip_rate=float(np.mean((e <= eps) | (e >= 1 - eps))))
    return AteEstimate(iptw_ate(e, data.d, data.y), method="lo-full", diagnostics=diag,
                       selected=np.ones(data.p, dtype=bool))


def soft_threshold(z, thr):
    """Proximal map of ``thr * |.|``."""
    return np.sign(z) * np.maximum(np.abs(z) - thr, 0.0)


@dataclass(frozen=True)
class OalConfig:
    """Outcome-adaptive lasso settings.

    ``lambda_grid=None`` uses 25 log-spaced values in [1e-4, 1e2] * n**0.6.
    gamma is tied to each lambda by lambda * n**(gamma/2 - 1) = n**2.
    """

    lambda_grid: Optional[tuple] = None
    tol: float = 1e-7
    max_iter: int = 5000

    def grid(self, n):
        if self.lambda_grid is not None:
            g = np.asarray(self.lambda_grid, dtype=float)
        else:
            g = np.logspace(-4, 2, 25) * n ** 0.6
        if len(g) == 0 or np.any(g < 0):
            raise ValueError("lambda grid must be non-empty and non-negative")
        return g


def oal_gamma(lam, n):
    """gamma solving lam * n**(gamma/2 - 1) = n**2."""
    return 2.0 * (3.0 - math.log(lam) / math.log(n))


def prox_logistic(z, d, penalty, start=None, tol=1e-7, max_iter=5000):
    """Minimize sum logistic loss + sum_j penalty_j |alpha_j| (free intercept).

    Proximal gradient with backtracking. ``penalty_j = inf`` pins alpha_j at 0.
    Returns (coef with intercept first, iterations, converged).
    """
    n, p = z.shape
    a = np.column_stack([np.ones(n), z])
    pen = np.concatenate([[0.0], np.asarray(penalty, dtype=float)])
    fixed = ~np.isfinite(pen)
    pen_f = np.where(fixed, 0.0, pen)
    coef = np.zeros(p + 1) if start is None else np.array(start, dtype=float)
    coef[fixed] = 0.0

    def loss(c):
        eta = a @ c
        return float(np.sum(np.logaddexp(0, eta) - d * eta))

    def objective(c):
        return loss(c) + float(np.sum(pen_f * np.abs(c)))

    lip = 0.25 * np.linalg.norm(a, 2) ** 2
    step = 1.0 / max(lip, 1e-12)
    f = objective(coef)
    for it in range(1, max_iter + 1):
        grad = a.T @ (_sigmoid(a @ coef) - d)
        l0 = loss(coef)
        t = min(step * 2.0, 1e6)
        while True:
            cand = soft_threshold(coef - t * grad, t * pen_f)
            cand[fixed] = 0.0
            diff = cand - coef
            if loss(cand) <= l0 + grad @ diff + (diff @ diff) / (2 * t) + 1e-12 or t < 1e-14:
                break
            t *= 0.5
        step = t
        f_new = objective(cand)
        coef = cand
        if abs(f - f_new) <= tol * max(1.0, abs(f)):
            return coef, it, True
        f = f_new
    return coef, max_iter, False


def ols_outcome_coefficients(data: Dataset):
    """Covariate coefficients of the least-squares fit of Y on [1, D, Z]."""
    z = _standardize(data.x)
    a = np.column_stack([np.ones(data.n), data.d, z])
    coef, *_ = np.linalg.lstsq(a, data.y, rcond=None)
    return coef[2:]


def fit_oal(data: Dataset, cfg: OalConfig = OalConfig(), eps=EPS_CLIP) -> AteEstimate:
    """Outcome-adaptive lasso propensity model tuned by wAMD, then IPTW."""
    data.require_both_arms()
    z = _standardize(data.x)
    beta = ols_outcome_coefficients(data)
    absb = np.abs(beta)
    zdata = Dataset(z, data.y, data.d, list(data.names), ["continuous"] * data.p)
    best = None
    start = None
    path = []
    for lam in cfg.grid(data.n):
        if lam == 0:
            pen = np.zeros(data.p)
        else:
            gamma = oal_gamma(lam, data.n)
            with np.errstate(divide="ignore"):
                omega = np.where(absb > 0, absb ** -gamma, np.inf)
            pen = lam * omega
        coef, iters, ok = prox_logistic(z, data.d, pen, start, cfg.tol, cfg.max_iter)
        start = coef
        if not np.any(coef[1:] != 0) and lam != 0:
            path.append((float(lam), math.inf, 0))
            continue
        e = np.clip(_sigmoid(coef[0] + z @ coef[1:]), eps, 1 - eps)
        score = wamd(zdata, ipt_weights(e, data.d), absb)
        path.append((float(lam), score, int(np.sum(coef[1:] != 0))))
        if best is None or score < best[0]:
            best = (score, float(lam), coef, e, iters, ok)
    if best is None:
        warnings.warn("adaptive lasso is all-zero on the whole grid; using plain logistic",
                      RuntimeWarning)
        est = fit_logistic_ipw(data, eps)
        return replace(est, method="oal", diagnostics=dict(est.diagnostics, fallback=True))
    score, lam, coef, e, iters, ok = best
    diag = {"lambda": lam, "gamma": oal_gamma(lam, data.n) if lam > 0 else math.nan,
            "wamd": score, "iterations": iters, "converged": ok, "path": path,
            "beta_tilde": beta, "e_hat": e, "fallback": False,
            "clip_rate": float(np.mean((e <= eps) | (e >= 1 - eps)))}
    return AteEstimate(iptw_ate(e, data.d, data.y), method="oal", diagnostics=diag,
                       selected=coef[1:] != 0)


# -- residual-on-residual (DML) ----------------------------------------------

def dml_ate(data: Dataset, outcome_fitter, propensity_fitter, plan: CrossFitPlan, seed=0,
            eps=EPS_CLIP) -> AteEstimate:
    """Partialling-out estimate sum(V U) / sum(V V), averaged over folds.

    ``outcome_fitter(train, seed)`` models E[Y | X]; ``propensity_fitter``
    models E[D | X]; both return :class:`FoldModel`.
    """
    plan.validate(data.d)
    thetas, masks = [], []
    for f, (aux, est) in enumerate(plan.folds()):
        train = data.subset(aux)
        ell = outcome_fitter(train, seed_key(seed, 61, f))
        em = propensity_fitter(train, seed_key(seed, 62, f))
        u = data.y[est] - ell.predict(data.x[est])
        v = data.d[est] - np.clip(em.predict(data.x[est]), eps, 1 - eps)
        vv = float(v @ v)
        if vv < 1e-10:
            raise EstimationError(f"fold {f}: no treatment variation left after residualizing")
        thetas.append(float(v @ u) / vv)
        if em.selected is not None:
            masks.append(em.selected)
    return AteEstimate(float(np.mean(thetas)), method="dml",
                       diagnostics={"fold_estimates": thetas},
                       selected=np.any(masks, axis=0) if masks else None)


def outcome_forest_fitter(config: ForestConfig):
    """Plain regression forest of Y on X."""
    def fit(train: Dataset, seed):
        forest = build_forest(train.x, train.y, _seeded(config, seed, 54))
        return FoldModel(forest.predict, forest.used_features())
    return fit


def regularized_outcome_fitter(imp, config: ForestConfig, pc: PenaltyConfig = PenaltyConfig()):
    """Regression forest of Y on X under the outcome-adaptive penalty."""
    def fit(train: Dataset, seed):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            lam = penalty_vector(imp, pc)
        fs0 = initial_feature_set(imp) if pc.initial_set else FeatureSet()
        if imp.degenerate:
            fs0 = FeatureSet()
            for j in range(train.p):
                fs0.add(j, "initial")
        forest, _ = build_regularized_forest(train.x, train.y, lam, fs0,
                                             _seeded(config, seed, 55), pc, imp.normalized)
        return FoldModel(forest.predict, forest.used_features())
    return fit


DML_VARIANTS = ("dml-full", "dml-oarf", "doarf")


def dml_variant(data: Dataset, variant, cfg: OarfConfig = OarfConfig(), seed=0) -> AteEstimate:
    """DML with plain forests, an OARF propensity, or OARF-style nuisances for both."""
    if variant not in DML_VARIANTS:
        raise ValueError(f"variant must be one of {DML_VARIANTS}")
    plan = CrossFitPlan.make(data.d, cfg.k, seed, data.groups)
    imp = None
    if variant != "dml-full":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            imp = outcome_importance(data, _seeded(cfg.outcome_forest, seed, 51))
    if variant == "doarf":
        outcome = regularized_outcome_fitter(imp, cfg.outcome_forest, cfg.penalty)
    else:
        outcome = outcome_forest_fitter(cfg.outcome_forest)
    prop = forest_fitter(cfg.propensity_forest, cfg.eps) if imp is None else oarf_fitter(imp, cfg)
    return replace(dml_ate(data, outcome, prop, plan, seed, cfg.eps), method=variant)
