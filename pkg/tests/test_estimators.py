import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oarf.data import Dataset, DataError
from oarf.estimators import (AteEstimate, CrossFitPlan, EstimationError, FoldModel, OalConfig,
                             OarfConfig, bootstrap_ci, bootstrap_replicates, cross_fit, dml_ate,
                             dml_variant, fit_logistic_ipw, fit_oal, ipt_weights, iptw_ate,
                             logistic_mle, oal_gamma, oarf_ate, percentile_interval,
                             prox_logistic, rf_full_ate, soft_threshold, tune_oarf, wamd,
                             weighted_ate, with_bootstrap)
from oarf.forest import ForestConfig
from oarf.simlab import DgpSpec, generate
from oarf.simlab.dgp import outcome_mean

from oracles import hajek, interpolated_quantile

SMALL = ForestConfig(num_trees=20)


def const_fitter(value):
    def fit(train, seed):
        return FoldModel(lambda x: np.full(len(x), value))
    return fit


def toy(n=300, seed=0, p=5):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, p))
    e = 1 / (1 + np.exp(-(0.8 * x[:, 0] - 0.8 * x[:, 1])))
    d = (rng.random(n) < e).astype(float)
    y = 0.5 * d + x[:, 0] + x[:, 1] + x[:, 2] + rng.normal(size=n)
    return Dataset(x, y, d)


# -- Hajek IPTW ----------------------------------------------------------------

FOUR = dict(d=np.array([1, 1, 0, 0.]), y=np.array([2, 4, 1, 3.]), e=np.array([0.8, 0.4, 0.5, 0.2]))


def test_iptw_hand_example_matches_exact_fractions():
    F = Fraction
    treated = (F(2) / F(4, 5) + F(4) / F(2, 5)) / (1 / F(4, 5) + 1 / F(2, 5))
    control = (F(1) / F(1, 2) + F(3) / F(4, 5)) / (1 / F(1, 2) + 1 / F(4, 5))
    assert treated == F(10, 3) and control == F(23, 13)
    expected = float(treated - control)
    assert expected == pytest.approx(1.5641, abs=1e-4)
    got = iptw_ate(FOUR["e"], FOUR["d"], FOUR["y"])
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(hajek(FOUR["e"], FOUR["d"], FOUR["y"]), abs=1e-12)


def test_iptw_half_propensity_is_difference_in_means():
    rng = np.random.default_rng(0)
    d = rng.integers(0, 2, 40).astype(float)
    y = rng.normal(size=40)
    assert iptw_ate(np.full(40, 0.5), d, y) == pytest.approx(y[d == 1].mean() - y[d == 0].mean())


def test_iptw_constant_outcome_is_zero():
    rng = np.random.default_rng(1)
    d = np.array([0, 1] * 10, dtype=float)
    assert iptw_ate(rng.uniform(0.1, 0.9, 20), d, np.full(20, 3.7)) == pytest.approx(0, abs=1e-12)


@pytest.mark.parametrize("bad", [0.0, 1.0, np.nan])
def test_iptw_rejects_boundary_propensities(bad):
    e = FOUR["e"].copy()
    e[0] = bad
    with pytest.raises(EstimationError):
        iptw_ate(e, FOUR["d"], FOUR["y"])


def test_iptw_needs_both_arms():
    with pytest.raises(EstimationError):
        iptw_ate(np.full(3, 0.5), np.ones(3), np.arange(3.0))


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 10_000))
def test_hajek_scale_invariance(c, seed):
    rng = np.random.default_rng(seed)
    n = 30
    d = np.r_[np.ones(5), np.zeros(5), rng.integers(0, 2, n - 10)].astype(float)
    y = rng.normal(size=n)
    tau = ipt_weights(rng.uniform(0.05, 0.95, n), d)
    base = weighted_ate(tau, d, y)
    assert abs(weighted_ate(c * tau, d, y) - base) <= 1e-12 * max(1.0, abs(base))


def test_weights_are_at_least_one():
    rng = np.random.default_rng(2)
    d = rng.integers(0, 2, 100).astype(float)
    assert np.all(ipt_weights(rng.uniform(0.01, 0.99, 100), d) >= 1)


# -- wAMD ------------------------------------------------------------------------

def test_wamd_hand_table():
    # treated rows 0-1, control rows 2-3; weighted arm means by hand:
    # treated (1*1 + 3*3)/4 = 2.5, (0 + 3*2)/4 = 1.5; control (2*2 + 2*4)/4 = 3, (2 + 10)/4 = 3
    x = np.array([[1, 0], [3, 2], [2, 1], [4, 5.]])
    data = Dataset(x, np.zeros(4), np.array([1, 1, 0, 0.]))
    tau = np.array([1, 3, 2, 2.])
    assert wamd(data, tau, [2, 1]) == pytest.approx(2 * 0.5 + 1 * 1.5)


def test_wamd_zero_weights_and_balance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(10, 3))
    data = Dataset(np.vstack([x, x]), np.zeros(20), np.r_[np.ones(10), np.zeros(10)])
    assert wamd(data, np.ones(20), [1, 2, 3]) == pytest.approx(0, abs=1e-12)
    other = Dataset(rng.normal(size=(20, 3)), np.zeros(20), data.d)
    assert wamd(other, np.ones(20), np.zeros(3)) == 0
    assert wamd(other, rng.uniform(1, 3, 20), np.ones(3)) >= 0


def test_wamd_length_check():
    data = Dataset(np.zeros((4, 2)), np.zeros(4), np.array([1, 0, 1, 0.]))
    with pytest.raises(ValueError):
        wamd(data, np.ones(3), [1, 1])


# -- cross-fitting ---------------------------------------------------------------

def test_cross_fit_averages_two_folds():
    data = Dataset(np.zeros((4, 1)), np.array([0.4, 0, 0.6, 0]), np.array([1, 0, 1, 0.]))
    plan = CrossFitPlan(2, np.array([0, 0, 1, 1]))
    est = cross_fit(data, plan, const_fitter(0.5))
    assert est.diagnostics["fold_estimates"] == pytest.approx([0.4, 0.6])
    assert est.theta == pytest.approx(0.5)


def test_cross_fit_averages_four_folds_exactly():
    y = np.array([1, 0, 2, 0, 3, 0, 4, 0.])
    d = np.array([1, 0] * 4, dtype=float)
    plan = CrossFitPlan(4, np.repeat(np.arange(4), 2))
    est = cross_fit(Dataset(np.zeros((8, 1)), y, d), plan, const_fitter(0.3))
    assert est.theta == 2.5
    assert est.theta == np.mean(est.diagnostics["fold_estimates"])


def test_cross_fit_equal_folds():
    d = np.array([1, 0] * 6, dtype=float)
    y = 2.0 * d
    plan = CrossFitPlan.make(d, 3, seed=0)
    assert cross_fit(Dataset(np.zeros((12, 1)), y, d), plan, const_fitter(0.5)).theta == 2.0


def test_cross_fit_fold_without_class_names_fold():
    d = np.array([1, 1, 0, 0.])
    plan = CrossFitPlan(2, np.array([0, 0, 1, 1]))
    with pytest.raises(DataError, match="fold 0"):
        cross_fit(Dataset(np.zeros((4, 1)), np.zeros(4), d), plan, const_fitter(0.5))


def test_plan_partitions_and_stratifies():
    rng = np.random.default_rng(4)
    d = (rng.random(101) < 0.3).astype(float)
    plan = CrossFitPlan.make(d, 3, seed=7)
    assert set(plan.fold_assignment) == {0, 1, 2}
    for f in range(3):
        share = d[plan.fold_assignment == f].sum()
        assert abs(share - d.sum() / 3) <= 1
    est_rows = np.concatenate([e for _, e in plan.folds()])
    assert sorted(est_rows) == list(range(101))
    again = CrossFitPlan.make(d, 3, seed=7)
    assert np.array_equal(plan.fold_assignment, again.fold_assignment)


def test_plan_keeps_groups_together():
    groups = np.array([0, 0, 1, 2, 2, 2, 3, 4, 5, 5, 6, 7])
    d = np.array([1, 1, 0, 1, 1, 1, 0, 1, 0, 0, 1, 0.])
    plan = CrossFitPlan.make(d, 2, seed=1, groups=groups)
    for g in np.unique(groups):
        assert len(set(plan.fold_assignment[groups == g])) == 1


def test_plan_needs_two_folds():
    with pytest.raises(ValueError):
        CrossFitPlan.make(np.array([0, 1.]), 1)


# -- bootstrap ---------------------------------------------------------------------

def test_percentile_interval_of_1_to_100():
    vals = np.arange(1, 101, dtype=float)
    lo, hi = percentile_interval(vals)
    assert (lo, hi) == pytest.approx((3.475, 97.525))
    assert lo == pytest.approx(interpolated_quantile(vals, 0.025))
    assert hi == pytest.approx(interpolated_quantile(vals, 0.975))


def test_percentile_interval_matches_oracle_on_random_samples():
    rng = np.random.default_rng(5)
    for size in (20, 37, 200):
        v = rng.normal(size=size)
        lo, hi = percentile_interval(v, 0.1)
        assert lo == pytest.approx(interpolated_quantile(v, 0.05), abs=1e-12)
        assert hi == pytest.approx(interpolated_quantile(v, 0.95), abs=1e-12)


def test_bootstrap_constant_pipeline_and_determinism():
    data = toy(60)
    assert bootstrap_ci(data, lambda b, s: AteEstimate(1.25), n_boot=30) == (1.25, 1.25)

    def mean_diff(b, s):
        return AteEstimate(b.y[b.d == 1].mean() - b.y[b.d == 0].mean())
    a = bootstrap_ci(data, mean_diff, n_boot=40, seed=3)
    assert a == bootstrap_ci(data, mean_diff, n_boot=40, seed=3)
    assert a != bootstrap_ci(data, mean_diff, n_boot=40, seed=4)
    assert a[0] <= a[1]


def test_bootstrap_needs_twenty_draws():
    with pytest.raises(ValueError):
        bootstrap_ci(toy(30), lambda b, s: AteEstimate(0.0), n_boot=19)


def test_bootstrap_redraw_limit():
    d = np.zeros(20)
    d[0] = 1
    data = Dataset(np.zeros((20, 1)), np.zeros(20), d)
    with pytest.raises(DataError):
        bootstrap_replicates(data, lambda b, s: AteEstimate(0.0), n_boot=50, max_retries=0)


def test_bootstrap_resamples_carry_unit_labels():
    seen = []
    bootstrap_replicates(toy(30), lambda b, s: seen.append(b.groups) or AteEstimate(0.0), n_boot=3)
    assert all(g is not None and len(g) == 30 for g in seen)


def test_with_bootstrap_adds_interval_and_inclusion():
    data = toy(50)

    def pipe(b, s):
        return AteEstimate(float(b.y.mean()), selected=np.array([True, False]))
    est = with_bootstrap(data, pipe, 25, seed=0)
    assert est.ci_lower <= est.ci_upper and est.n_bootstrap == 25
    assert list(est.diagnostics["bootstrap_inclusion"]) == [1.0, 0.0]


def test_ate_estimate_rejects_inverted_interval():
    with pytest.raises(ValueError):
        AteEstimate(0.0, ci_lower=1.0, ci_upper=0.0)


# -- OARF estimator and tuning --------------------------------------------------------

def test_oarf_ate_is_deterministic_and_reports_diagnostics():
    data = toy(200)
    cfg = OarfConfig(SMALL, SMALL)
    a = oarf_ate(data, cfg, seed=11)
    b = oarf_ate(data, cfg, seed=11)
    assert a.theta == b.theta and np.isfinite(a.theta)
    assert a.method == "oarf"
    assert a.diagnostics["wamd"] >= 0
    assert a.diagnostics["importance"].max() == 1.0
    assert len(a.diagnostics["fold_estimates"]) == 2
    assert a.selected.shape == (data.p,)
    assert np.mean(a.diagnostics["fold_estimates"]) == a.theta


def test_oarf_auxiliary_importance_mode_runs():
    est = oarf_ate(toy(150), OarfConfig(SMALL, SMALL, importance_sample="auxiliary"), seed=1)
    assert np.isfinite(est.theta)
    with pytest.raises(ValueError):
        oarf_ate(toy(150), OarfConfig(SMALL, SMALL, importance_sample="bogus"))


def test_oarf_rejects_tiny_samples():
    with pytest.raises(DataError):
        oarf_ate(toy(30), OarfConfig(ForestConfig(min_node_size=20), SMALL))


def test_rf_full_runs():
    est = rf_full_ate(toy(120), SMALL, seed=0)
    assert est.method == "rf-full" and np.isfinite(est.theta)


def test_tune_singleton_grid_and_tie_break():
    data = toy(150)
    best, est, table = tune_oarf(data, [(2, 10, 20)], OarfConfig(SMALL, SMALL), seed=0)
    assert best == (2, 10, 20) and len(table) == 1
    best, est, table = tune_oarf(data, [(3, 10, 20), (2, 10, 20), (2, 5, 20)],
                                 OarfConfig(SMALL, SMALL), seed=0)
    scores = dict(table)
    assert scores[best] == min(scores.values())
    assert est.diagnostics["wamd"] == scores[best]
    with pytest.raises(ValueError):
        tune_oarf(data, [])


# -- logistic baselines --------------------------------------------------------------------

def test_logistic_null_model_matches_treated_share():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(400, 3))
    d = (rng.random(400) < 0.3).astype(float)
    y = d + rng.normal(size=400)
    est = fit_logistic_ipw(Dataset(x, y, d))
    assert est.diagnostics["converged"]
    assert abs(est.diagnostics["e_hat"].mean() - d.mean()) < 1e-6
    diff = y[d == 1].mean() - y[d == 0].mean()
    assert est.theta == pytest.approx(diff, abs=0.1)


def test_logistic_mle_gradient_is_zero_at_solution():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(300, 2))
    d = (rng.random(300) < 1 / (1 + np.exp(-z[:, 0]))).astype(float)
    coef, info = logistic_mle(z, d)
    assert info["converged"] and info["grad_norm"] < 1e-8


def test_logistic_separation_is_flagged_and_clipped():
    x = np.linspace(-3, 3, 40)[:, None]
    d = (x[:, 0] > 0).astype(float)
    with pytest.warns(RuntimeWarning):
        est = fit_logistic_ipw(Dataset(x, x[:, 0] + d, d))
    assert est.diagnostics["separation"]
    assert est.diagnostics["e_hat"].min() >= 0.01 and est.diagnostics["e_hat"].max() <= 0.99


def test_soft_threshold_matches_casewise_minimizer():
    # argmin_a 0.5 (a - z)^2 + t |a|, written out case by case
    def casewise(z, t):
        if z > t:
            return z - t
        if z < -t:
            return z + t
        return 0.0
    rng = np.random.default_rng(8)
    for z, t in zip(rng.normal(scale=3, size=500), rng.uniform(0, 2, 500)):
        assert abs(soft_threshold(np.array([z]), t)[0] - casewise(z, t)) <= 1e-12


def test_oal_gamma_relation():
    for n in (100, 1000):
        for lam in (0.01, 1.0, 50.0):
            g = oal_gamma(lam, n)
            assert lam * n ** (g / 2 - 1) == pytest.approx(n ** 2)


def test_prox_logistic_zero_penalty_is_mle_and_infinite_pins():
    rng = np.random.default_rng(9)
    z = rng.normal(size=(300, 3))
    d = (rng.random(300) < 1 / (1 + np.exp(-(z[:, 0] + z[:, 1])))).astype(float)
    mle, _ = logistic_mle(z, d)
    coef, _, ok = prox_logistic(z, d, np.zeros(3), tol=1e-12, max_iter=20000)
    assert np.allclose(coef, mle, atol=1e-4)
    pinned, _, _ = prox_logistic(z, d, np.array([0.0, np.inf, 0.0]))
    assert pinned[2] == 0.0 and pinned[1] != 0.0


def test_oal_zero_grid_keeps_all_coefficients():
    data = toy(300)
    est = fit_oal(data, OalConfig(lambda_grid=(0.0,)))
    assert est.selected.all()
    assert est.diagnostics["lambda"] == 0.0


def test_oal_excludes_features_without_outcome_signal():
    # X4 and X5 carry no outcome signal; X1 and X2 drive treatment and outcome
    est = fit_oal(toy(1000, seed=2))
    assert est.selected[0] and est.selected[1]
    assert not est.selected[3] and not est.selected[4]
    assert est.diagnostics["wamd"] == min(s for _, s, _ in est.diagnostics["path"])


def test_oal_all_zero_path_falls_back_with_warning():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(200, 3))
    d = (rng.random(200) < 0.5).astype(float)
    y = rng.normal(size=200)
    with pytest.warns(RuntimeWarning, match="all-zero"):
        est = fit_oal(Dataset(x, y, d), OalConfig(lambda_grid=(1e6,)))
    assert est.diagnostics["fallback"] and est.selected.all()


# -- DML ----------------------------------------------------------------------------------

def test_dml_with_oracle_nuisances_is_nearly_unbiased():
    thetas = []
    for s in range(50):
        rng = np.random.default_rng(s)
        x = rng.normal(size=(2000, 2))
        d = (rng.random(2000) < 0.5).astype(float)
        y = 0.5 * d + rng.normal(size=2000)
        data = Dataset(x, y, d)
        plan = CrossFitPlan.make(d, 2, s)
        thetas.append(dml_ate(data, const_fitter(0.0), const_fitter(0.5), plan).theta)
    assert abs(np.mean(thetas) - 0.5) < 0.05


def test_dml_degenerate_residual_errors():
    d = np.array([1, 0] * 5, dtype=float)
    data = Dataset(d[:, None], d, d)
    plan = CrossFitPlan(2, np.repeat([0, 1], 5))
    assert np.isfinite(dml_ate(data, const_fitter(0.0), const_fitter(0.5), plan).theta)
    # a propensity model that reproduces D exactly leaves no residual variation
    echo = lambda train, seed: FoldModel(lambda x: x[:, 0].copy())
    with pytest.raises(EstimationError, match="fold 0"):
        dml_ate(data, const_fitter(0.0), echo, plan, eps=0.0)


def test_dml_orthogonality_smoke():
    # true nuisances, then every propensity shifted by +0.02
    dml_shift, ipw_shift = [], []
    for s in range(20):
        spec = DgpSpec(1, n=2000)
        data, e0 = generate(spec, s)
        ell = spec.theta * e0 + outcome_mean(spec, data.x)
        plan = CrossFitPlan(2, np.arange(data.n) % 2)
        row_of = {tuple(r): i for i, r in enumerate(data.x)}

        def lookup(values):
            return lambda train, seed: FoldModel(
                lambda x: np.array([values[row_of[tuple(r)]] for r in x]))
        e_true = np.clip(e0, 0.01, 0.99)
        e_bump = np.clip(e0 + 0.02, 0.01, 0.99)
        a = dml_ate(data, lookup(ell), lookup(e_true), plan).theta
        b = dml_ate(data, lookup(ell), lookup(e_bump), plan).theta
        dml_shift.append(abs(a - b))
        ipw_shift.append(abs(iptw_ate(e_true, data.d, data.y) - iptw_ate(e_bump, data.d, data.y)))
    assert np.mean(dml_shift) < np.mean(ipw_shift)


@pytest.mark.parametrize("variant", ["dml-full", "dml-oarf", "doarf"])
def test_dml_variants_run(variant):
    est = dml_variant(toy(160), variant, OarfConfig(SMALL, SMALL), seed=2)
    assert est.method == variant and np.isfinite(est.theta)


def test_dml_unknown_variant():
    with pytest.raises(ValueError):
        dml_variant(toy(60), "triple")
