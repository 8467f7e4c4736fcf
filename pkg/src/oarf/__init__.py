"""Outcome-adaptive random forests for propensity scores and treatment effects."""
from .adaptive import (EPS_CLIP, RRF_PENALTY, FeatureSet, PenaltyConfig, PropensityFit,
                       build_regularized_forest, fit_oarf, fit_propensity, initial_feature_set,
                       outcome_importance, penalty_vector, regularized_gain)
from .data import Dataset, DataError
from .estimators import (AteEstimate, CrossFitPlan, OalConfig, OarfConfig, bootstrap_ci,
                         cross_fit, dml_ate, dml_variant, fit_logistic_ipw, fit_oal, iptw_ate,
                         ipt_weights, oarf_ate, rf_full_ate, tune_oarf, wamd)
from .forest import (Forest, ForestConfig, ImportanceVector, Split, Tree, air_importance,
                     best_split, build_forest, build_tree)

__version__ = "0.1.0"
