"""Simulation designs and the Monte Carlo runner."""
from .dgp import DgpSpec, generate, equicorrelated_normal, outcome_mean, treatment_index
from .runner import (METHODS, McReport, MethodResult, MethodSettings, mse_vs_n,
                     replicate_seed, run_monte_carlo, write_report_csv, write_report_json,
                     report_header)
