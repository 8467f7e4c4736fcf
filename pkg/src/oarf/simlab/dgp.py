"""The fifteen simulation designs.

Each design has a treatment index a(x) with D ~ Bernoulli(logistic(a)) and
an outcome Y = theta * D + g(x) + eps, eps ~ N(0, 1). Covariates are
equicorrelated standard normals.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..data import Dataset

NU_1 = (1, 1, 0, 0, 1, 1)
NU_2 = (0.4, 0.4, 0, 0, 1, 1)
NU_8 = (1, 1, 1, 1, 1, 1, 0, 0, 1, 1)
BETA = (0.6, 0.6, 0.6, 0.6)


def _pad(coefs, p):
    v = np.zeros(p)
    v[:len(coefs)] = coefs
    return v


def _ind(cond):
    return cond.astype(float)


def _two_pairs(X):
    return 0.8 * X[:, 0] * X[:, 1] + 0.8 * X[:, 2] * X[:, 3]


def _four_pairs(X):
    return _two_pairs(X) + 0.8 * X[:, 4] * X[:, 5] + 0.8 * X[:, 6] * X[:, 7]


def _steps(X, a, b, c, d):
    return 2 * _ind(X[:, a] > 0) * _ind(X[:, b] > 1) + 2 * _ind(X[:, c] > 0) * _ind(X[:, d] > 1)


# setting -> (treatment index, outcome mean without theta * D, min p, relevant features)
def _design(setting):
    lin = lambda nu: (lambda X: X @ _pad(nu, X.shape[1]))
    beta = lin(BETA)
    table = {
        1: (lin(NU_1), beta, 6, 4),
        2: (lin(NU_2), beta, 6, 4),
        3: (lin(NU_1), _two_pairs, 6, 4),
        4: (lambda X: X[:, 0] * (1 - X[:, 1]) + X[:, 4] * (1 - X[:, 5]), _two_pairs, 6, 4),
        5: (lambda X: 0.8 * X[:, 0] * X[:, 1] + 0.8 * X[:, 4] * X[:, 5], _two_pairs, 6, 4),
        6: (lambda X: 2 * np.cos(X[:, 1]) + lin(NU_1)(X), _two_pairs, 6, 4),
        7: (lambda X: _steps(X, 0, 1, 4, 5) + X[:, 0] * X[:, 5], _two_pairs, 6, 4),
        8: (lambda X: 2 * X[:, 1] * (1 - X[:, 5]) + 2 * X[:, 0] * _ind(X[:, 8] > 1) + lin(NU_8)(X),
            _four_pairs, 10, 8),
        9: (lambda X: (0.5 * X[:, 0] ** 2 + 0.5 * X[:, 1] - X[:, 2] * X[:, 3] + 0.5 * X[:, 4]
                       + 0.5 * X[:, 5] + 0.5 * X[:, 8] ** 2 + 0.5 * X[:, 9]),
            lambda X: (X[:, 0] * X[:, 1] + X[:, 2] * X[:, 3] + 0.5 * X[:, 1] + 0.5 * X[:, 5]
                       + X[:, 6] * X[:, 7]), 10, 8),
        10: (lambda X: (-np.exp(X[:, 0]) + 0.4 * X[:, 1] + np.exp(X[:, 2]) + 0.4 * X[:, 3]
                        + 0.5 * X[:, 4] ** 2 + X[:, 5] * X[:, 8] + 0.4 * X[:, 9]),
             _four_pairs, 10, 8),
        11: (lin(NU_1), beta, 6, 4),
        12: (lin(NU_2), beta, 6, 4),
        13: (lambda X: X[:, 0] * (1 - X[:, 1]) + X[:, 4] * (1 - X[:, 5]),
             lambda X: X[:, 0] * (1 - X[:, 1]) + X[:, 2] * (1 - X[:, 3]), 6, 4),
        14: (lambda X: 2 * np.cos(X[:, 1]) + lin(NU_1)(X),
             lambda X: 2 * np.cos(X[:, 1]) + beta(X), 6, 4),
        15: (lambda X: _steps(X, 0, 1, 4, 5) + X[:, 0] * X[:, 5],
             lambda X: _steps(X, 0, 1, 2, 3) + X[:, 0] * X[:, 3], 6, 4),
    }
    if setting not in table:
        raise ValueError(f"setting must be in 1..15, got {setting}")
    return table[setting]


@dataclass(frozen=True)
class DgpSpec:
    """One simulation design. ``rho=None`` uses the setting's own correlation."""

    setting: int
    n: int = 500
    p: int = 20
    theta: float = 0.5
    rho: Optional[float] = None

    def __post_init__(self):
        _, _, min_p, _ = _design(self.setting)
        if self.p < min_p:
            raise ValueError(f"setting {self.setting} needs p >= {min_p}")
        if not 0.0 <= self.correlation <= 0.95:
            raise ValueError("rho must lie in [0, 0.95]")
        if self.n < 2:
            raise ValueError("n must be >= 2")

    @property
    def correlation(self):
        if self.rho is not None:
            return self.rho
        return 0.2 if self.setting in (11, 12) else 0.0

    @property
    def relevant(self):
        """Indices (0-based) of the covariates an outcome-adaptive model should keep."""
        return list(range(_design(self.setting)[3]))

    def nu(self):
        """Linear treatment coefficients, for the designs that have them."""
        if self.setting in (1, 3, 6, 11, 14):
            return _pad(NU_1, self.p)
        if self.setting in (2, 12):
            return _pad(NU_2, self.p)
        if self.setting == 8:
            return _pad(NU_8, self.p)
        return None

    def beta(self):
        if self.setting in (1, 2, 11, 12, 14):
            return _pad(BETA, self.p)
        return None


def equicorrelated_normal(rng, n, p, rho):
    z = rng.standard_normal((n, p))
    if rho == 0:
        return z
    cov = np.full((p, p), rho)
    np.fill_diagonal(cov, 1.0)
    return z @ np.linalg.cholesky(cov).T


def treatment_index(spec: DgpSpec, X):
    return _design(spec.setting)[0](X)


def outcome_mean(spec: DgpSpec, X):
    return _design(spec.setting)[1](X)


def generate(spec: DgpSpec, seed):
    """Draw one dataset; returns (Dataset, true propensity e0(x))."""
    rng = np.random.default_rng(seed)
    X = equicorrelated_normal(rng, spec.n, spec.p, spec.correlation)
    a = treatment_index(spec, X)
    e0 = 1.0 / (1.0 + np.exp(-a))
    d = (rng.random(spec.n) < e0).astype(float)
    y = spec.theta * d + outcome_mean(spec, X) + rng.standard_normal(spec.n)
    names = [f"X{j + 1}" for j in range(spec.p)]
    return Dataset(X, y, d, names, ["continuous"] * spec.p), e0
