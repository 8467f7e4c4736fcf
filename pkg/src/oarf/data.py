"""The dataset container shared by every stage of the pipeline."""
from dataclasses import dataclass, field

import numpy as np

CONTINUOUS = "continuous"
ORDINAL = "ordinal"
BINARY = "binary"
KINDS = (CONTINUOUS, ORDINAL, BINARY)


class DataError(ValueError):
    """Raised when a dataset violates its invariants."""


def infer_kind(col):
    vals = np.unique(col)
    if np.all(np.isin(vals, (0.0, 1.0))):
        return BINARY
    if np.all(vals == np.round(vals)) and len(vals) <= 20:
        return ORDINAL
    return CONTINUOUS


@dataclass
class Dataset:
    """Covariates ``x`` (n, p), outcome ``y`` and binary treatment ``d``.

    ``names`` and ``kinds`` carry per-column metadata; kinds are inferred
    from the values when omitted. ``groups`` optionally labels rows that are
    copies of one unit (bootstrap resamples) so folds never split them.
    """

    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    names: list = field(default=None)
    kinds: list = field(default=None)
    groups: np.ndarray = field(default=None)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.d = np.asarray(self.d, dtype=float).ravel()
        if self.x.ndim != 2:
            raise DataError(f"x must be 2-D, got shape {self.x.shape}")
        n, p = self.x.shape
        if len(self.y) != n or len(self.d) != n:
            raise DataError(f"length mismatch: x has {n} rows, y {len(self.y)}, d {len(self.d)}")
        if np.isnan(self.x).any() or np.isnan(self.y).any() or np.isnan(self.d).any():
            raise DataError("dataset contains NaN")
        bad = np.flatnonzero((self.d != 0) & (self.d != 1))
        if len(bad):
            raise DataError(f"treatment must be 0/1; row {bad[0]} has value {self.d[bad[0]]}")
        if self.groups is not None:
            self.groups = np.asarray(self.groups)
            if len(self.groups) != n:
                raise DataError("groups must have one label per row")
        if self.names is None:
            self.names = [f"X{j + 1}" for j in range(p)]
        if len(self.names) != p:
            raise DataError(f"{len(self.names)} names for {p} columns")
        if self.kinds is None:
            self.kinds = [infer_kind(self.x[:, j]) for j in range(p)] if n else [CONTINUOUS] * p
        for j, kind in enumerate(self.kinds):
            if kind not in KINDS:
                raise DataError(f"unknown column kind {kind!r}")
            if kind == BINARY and not np.all(np.isin(self.x[:, j], (0.0, 1.0))):
                raise DataError(f"column {self.names[j]!r} is tagged binary but has other values")

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def p(self):
        return self.x.shape[1]

    def subset(self, rows):
        rows = np.asarray(rows)
        groups = None if self.groups is None else self.groups[rows]
        return Dataset(self.x[rows], self.y[rows], self.d[rows], list(self.names),
                       list(self.kinds), groups)

    def require_both_arms(self):
        n1 = int(self.d.sum())
        if n1 == 0 or n1 == self.n:
            raise DataError("treatment has a single class; both arms are required")

    def with_treatment(self):
        """Design ``[D, X]`` used by the outcome model."""
        return np.column_stack([self.d, self.x])
