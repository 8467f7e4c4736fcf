"""CSV ingestion for empirical studies and the dataset fetch helper."""
import hashlib
import os
import urllib.request
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .data import BINARY, CONTINUOUS, ORDINAL, Dataset, DataError, infer_kind


@dataclass(frozen=True)
class IngestConfig:
    """``missing_threshold``: covariates missing in a larger fraction of rows are dropped.

    ``treated_value`` / ``outcome_positive`` map two-level string columns to 1;
    ``drop`` lists columns that are never used as covariates.
    """

    missing_threshold: float = 0.5
    treated_value: Optional[str] = None
    outcome_positive: Optional[str] = None
    drop: tuple = ()


@dataclass
class IngestReport:
    rows_read: int
    rows_dropped: int
    rows_retained: int
    columns_dropped: list
    kinds: dict
    category_codes: dict = field(default_factory=dict)


def _binary_column(col, name, positive, what):
    """Map a column to 0/1, naming the first offending row on failure."""
    if col.dtype == object or isinstance(col.dtype, pd.CategoricalDtype):
        levels = list(pd.unique(col.dropna()))
        if positive is None:
            raise DataError(f"{what} column {name!r} is non-numeric; pass the value that means 1")
        if positive not in levels:
            raise DataError(f"{what} value {positive!r} does not occur in column {name!r}")
        return (col == positive).astype(float).where(col.notna())
    num = pd.to_numeric(col, errors="coerce")
    bad = col.notna() & ~num.isin([0, 1])
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"{what} column {name!r} must be 0/1; data row {row + 1} has value "
                        f"{col.iloc[row]!r}")
    return num


def load_csv(path, outcome_col, treatment_col, cfg: IngestConfig = IngestConfig()):
    """Read a headered CSV into a Dataset plus an :class:`IngestReport`.

    Covariate columns above the missingness threshold are dropped first,
    then incomplete rows (complete-case). String columns become integer codes
    in order of first appearance.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    df = pd.read_csv(path, float_precision="round_trip")
    for col in (outcome_col, treatment_col):
        if col not in df.columns:
            raise DataError(f"column {col!r} not found; available: {list(df.columns)}")
    rows_read = len(df)
    d = _binary_column(df[treatment_col], treatment_col, cfg.treated_value, "treatment")
    y_raw = df[outcome_col]
    if y_raw.dtype == object:
        y = _binary_column(y_raw, outcome_col, cfg.outcome_positive, "outcome")
    else:
        y = pd.to_numeric(y_raw, errors="coerce")
    covs = [c for c in df.columns if c not in (outcome_col, treatment_col) and c not in cfg.drop]
    miss = df[covs].isna().mean()
    dropped_cols = [c for c in covs if miss[c] > cfg.missing_threshold]
    keep = [c for c in covs if c not in dropped_cols]
    if not keep:
        raise DataError("no covariate columns remain after the missingness filter")
    x = df[keep].copy()
    codes = {}
    for c in keep:
        if x[c].dtype == object or isinstance(x[c].dtype, pd.CategoricalDtype):
            levels = list(pd.unique(x[c].dropna()))
            codes[c] = {str(v): i for i, v in enumerate(levels)}
            x[c] = x[c].map({v: i for i, v in enumerate(levels)})
    complete = x.notna().all(axis=1) & y.notna() & d.notna()
    x = x[complete].astype(float)
    if len(x) == 0:
        raise DataError("no complete rows remain")
    kinds = {}
    for c in keep:
        kinds[c] = ORDINAL if c in codes and len(codes[c]) > 2 else infer_kind(x[c].to_numpy())
    data = Dataset(x.to_numpy(), y[complete].to_numpy(), d[complete].to_numpy(), keep,
                   [kinds[c] for c in keep])
    report = IngestReport(rows_read, int((~complete).sum()), int(complete.sum()),
                          dropped_cols, kinds, codes)
    return data, report


def write_csv(data: Dataset, path, outcome="y", treatment="d"):
    """Write a Dataset with full float precision (round-trips through load_csv)."""
    df = pd.DataFrame(data.x, columns=data.names)
    df[outcome] = data.y
    df[treatment] = data.d
    df.to_csv(path, index=False, float_format="%.17g")


# -- empirical datasets ----------------------------------------------------------

SOURCES = {
    "rhc": "https://hbiostat.org/data/repo/rhc.csv",
    "birthweight": "http://www.stata-press.com/data/r13/cattaneo2.dta",
}

# digests of the published files; None until first verified download
CHECKSUMS = {"rhc": None, "birthweight": None}

# identifiers, dates and post-treatment variables of the RHC file
RHC_EXCLUDE = ("Unnamed: 0", "ptid", "sadmdte", "dschdte", "dthdte", "lstctdte", "death",
               "dth30", "swang1", "t3d30", "surv2md1")

BIRTHWEIGHT_EXCLUDE = ("bweight", "mbsmoke", "msmoke", "lbweight")


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def verify_checksum(name, path):
    """Compare with the recorded digest, or with a sidecar written on first download."""
    digest = sha256_file(path)
    expected = CHECKSUMS.get(name)
    sidecar = path + ".sha256"
    if expected is None and os.path.exists(sidecar):
        with open(sidecar) as fh:
            expected = fh.read().strip()
    if expected is None:
        with open(sidecar, "w") as fh:
            fh.write(digest + "\n")
        return digest
    if digest != expected:
        raise DataError(f"checksum mismatch for {name}: got {digest}, expected {expected}")
    return digest


def prepare_rhc(raw_path, out_path):
    """Binary treatment ``rhc`` and outcome ``survival30`` (alive at day 30)."""
    df = pd.read_csv(raw_path)
    out = df.drop(columns=[c for c in RHC_EXCLUDE if c in df.columns])
    out["rhc"] = (df["swang1"] == "RHC").astype(int)
    out["survival30"] = (df["dth30"] == "No").astype(int)
    out.to_csv(out_path, index=False)
    return out_path


def prepare_birthweight(raw_path, out_path):
    """Outcome ``bweight`` (grams) and treatment ``mbsmoke`` (0/1), 19 covariates."""
    df = pd.read_stata(raw_path, convert_categoricals=False)
    out = df.drop(columns=[c for c in BIRTHWEIGHT_EXCLUDE if c in df.columns])
    out["bweight"] = df["bweight"].astype(float)
    out["mbsmoke"] = df["mbsmoke"].astype(int)
    out.to_csv(out_path, index=False)
    return out_path


def fetch(name, dest):
    """Download one empirical dataset, verify it and write an analysis-ready CSV."""
    if name not in SOURCES:
        raise ValueError(f"unknown dataset {name!r}; known: {sorted(SOURCES)}")
    os.makedirs(dest, exist_ok=True)
    url = SOURCES[name]
    raw = os.path.join(dest, os.path.basename(url))
    if not os.path.exists(raw):
        urllib.request.urlretrieve(url, raw)
    verify_checksum(name, raw)
    out = os.path.join(dest, f"{name}.csv")
    return (prepare_rhc if name == "rhc" else prepare_birthweight)(raw, out)
