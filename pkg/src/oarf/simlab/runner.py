"""Monte Carlo runner: methods, replicate loop, summary metrics and writers."""
import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .. import estimators as est
from ..adaptive import EPS_CLIP, RRF_PENALTY
from ..data import Dataset
from ..forest import ForestConfig, n_threads, seed_key
from ..util import config_hash, to_jsonable
from .dgp import DgpSpec, generate


@dataclass(frozen=True)
class MethodSettings:
    """Knobs shared by all methods of one simulation run."""

    oarf: est.OarfConfig = est.OarfConfig()
    forest: ForestConfig = ForestConfig()
    oal: est.OalConfig = est.OalConfig()
    eps: float = EPS_CLIP
    k: int = 2


def _targ(data, spec):
    keep = spec.relevant
    return Dataset(data.x[:, keep], data.y, data.d, [data.names[j] for j in keep],
                   [data.kinds[j] for j in keep])


def _embed(mask, spec, p):
    out = np.zeros(p, dtype=bool)
    out[spec.relevant] = mask
    return out


def _oracle(data, e0, seed, ms, spec):
    e = np.clip(e0, ms.eps, 1 - ms.eps)
    return est.AteEstimate(est.iptw_ate(e, data.d, data.y), method="oracle")


def _oarf(data, e0, seed, ms, spec):
    return est.oarf_ate(data, ms.oarf, seed)


def _rrf(data, e0, seed, ms, spec):
    return replace(est.oarf_ate(data, replace(ms.oarf, penalty=RRF_PENALTY), seed), method="rrf")


def _rf_full(data, e0, seed, ms, spec):
    return est.rf_full_ate(data, ms.forest, seed, ms.k, ms.eps)


def _rf_targ(data, e0, seed, ms, spec):
    r = est.rf_full_ate(_targ(data, spec), ms.forest, seed, ms.k, ms.eps)
    return replace(r, method="rf-targ", selected=_embed(r.selected, spec, data.p))


def _lo_full(data, e0, seed, ms, spec):
    return est.fit_logistic_ipw(data, ms.eps)


def _lo_targ(data, e0, seed, ms, spec):
    r = est.fit_logistic_ipw(_targ(data, spec), ms.eps)
    return replace(r, method="lo-targ", selected=_embed(r.selected, spec, data.p))


def _oal(data, e0, seed, ms, spec):
    return est.fit_oal(data, ms.oal, ms.eps)


def _dml(variant):
    def run(data, e0, seed, ms, spec):
        return est.dml_variant(data, variant, ms.oarf, seed)
    return run


METHODS = {
    "oracle": _oracle,
    "oarf": _oarf,
    "rrf": _rrf,
    "rf-full": _rf_full,
    "rf-targ": _rf_targ,
    "lo-full": _lo_full,
    "lo-targ": _lo_targ,
    "oal": _oal,
    "dml-full": _dml("dml-full"),
    "dml-oarf": _dml("dml-oarf"),
    "doarf": _dml("doarf"),
}


def check_methods(methods):
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown method(s) {unknown}; known: {sorted(METHODS)}")
    return list(methods)


@dataclass
class MethodResult:
    theta: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    selected: np.ndarray
    runtime: np.ndarray
    failures: list = field(default_factory=list)


@dataclass
class McReport:
    """Replicate-level estimates per method plus their summaries.

    Variances use the 1/R convention, so ``mse == bias**2 + variance``.
    """

    spec: DgpSpec
    reps: int
    seed: int
    results: dict

    def summary(self):
        out = {}
        for name, r in self.results.items():
            ok = ~np.isnan(r.theta)
            th = r.theta[ok]
            row = {"failures": len(r.failures), "runtime_mean": float(np.mean(r.runtime))}
            if len(th):
                bias = float(th.mean() - self.spec.theta)
                var = float(th.var())
                row.update(bias=bias, variance=var, mse=bias ** 2 + var,
                           mse_direct=float(np.mean((th - self.spec.theta) ** 2)))
                lo, hi = r.ci_lo[ok], r.ci_hi[ok]
                has_ci = ~np.isnan(lo)
                if has_ci.any():
                    cover = (lo[has_ci] <= self.spec.theta) & (self.spec.theta <= hi[has_ci])
                    row.update(coverage=float(cover.mean()),
                               width=float(np.mean(hi[has_ci] - lo[has_ci])))
                row["selection"] = r.selected[ok].mean(axis=0).tolist()
            out[name] = row
        return out


def replicate_seed(seed, setting, r):
    return seed_key(seed, setting, r)


def _one_replicate(spec, methods, r, rs, with_ci, n_boot, ms):
    data, e0 = generate(spec, rs)
    rows = {}
    for name in methods:
        fn = METHODS[name]
        t0 = time.perf_counter()
        try:
            def pipeline(d, s, _e0=e0):
                return fn(d, _e0, s, ms, spec)
            if with_ci and name != "oracle":
                res = est.with_bootstrap(data, pipeline, n_boot, rs)
            else:
                res = pipeline(data, rs)
            rows[name] = (res, time.perf_counter() - t0, None)
        except Exception as exc:  # recorded per replicate, not fatal
            rows[name] = (None, time.perf_counter() - t0,
                          f"rep {r}: {type(exc).__name__}: {exc}")
    return r, rows


def run_monte_carlo(spec: DgpSpec, methods, reps, with_ci=False, seed=0, n_boot=200,
                    settings: MethodSettings = MethodSettings(), order=None,
                    progress=None, seeds=None) -> McReport:
    """Run every method on ``reps`` independent draws of ``spec``.

    Replicate r uses the stream ``replicate_seed(seed, setting, r)`` unless
    ``seeds`` lists the per-replicate seeds explicitly. ``order`` permutes the
    execution order (results are stored by replicate index, so the report
    does not depend on it).
    """
    if reps < 2:
        raise ValueError("reps must be >= 2")
    methods = check_methods(methods)
    p = spec.p
    res = {m: MethodResult(np.full(reps, np.nan), np.full(reps, np.nan), np.full(reps, np.nan),
                           np.zeros((reps, p), dtype=bool), np.zeros(reps)) for m in methods}
    order = list(range(reps)) if order is None else list(order)
    if sorted(order) != list(range(reps)):
        raise ValueError("order must be a permutation of the replicate indices")

    if seeds is None:
        seeds = [replicate_seed(seed, spec.setting, r) for r in range(reps)]
    elif len(seeds) != reps:
        raise ValueError("seeds must have one entry per replicate")

    def work(r):
        return _one_replicate(spec, methods, r, seeds[r], with_ci, n_boot, settings)

    threads = n_threads()
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            outputs = list(ex.map(work, order))
    else:
        outputs = []
        for r in order:
            outputs.append(work(r))
            if progress:
                progress(len(outputs), reps)
    for r, rows in sorted(outputs, key=lambda t: t[0]):
        for name, (e, secs, err) in rows.items():
            mr = res[name]
            mr.runtime[r] = secs
            if err is not None:
                mr.failures.append(err)
                continue
            mr.theta[r] = e.theta
            mr.ci_lo[r] = e.ci_lower
            mr.ci_hi[r] = e.ci_upper
            if e.selected is not None:
                mr.selected[r] = e.selected
    return McReport(spec, reps, seed, res)


def mse_vs_n(spec: DgpSpec, n_grid, methods, reps, seed=0,
             settings: MethodSettings = MethodSettings()):
    """Long-format rows (setting, n, method, bias, var, mse), one per (n, method)."""
    n_grid = list(n_grid)
    if n_grid != sorted(n_grid):
        raise ValueError("n_grid must be sorted ascending")
    rows = []
    for n in n_grid:
        rep = run_monte_carlo(replace(spec, n=int(n)), methods, reps, seed=seed, settings=settings)
        for name, s in rep.summary().items():
            rows.append({"setting": spec.setting, "n": int(n), "method": name,
                         "bias": s.get("bias"), "var": s.get("variance"), "mse": s.get("mse")})
    return rows


# -- writers -------------------------------------------------------------------

def report_header(report: McReport, settings: MethodSettings, extra=None):
    cfg = {"spec": asdict(report.spec), "reps": report.reps, "settings": to_jsonable(settings)}
    if extra:
        cfg.update(extra)
    return {"seed": report.seed, "config_hash": config_hash(cfg), "config": cfg}


def write_report_csv(report: McReport, path, header=None):
    """Long format: one row per (method, replicate)."""
    with open(path, "w", newline="") as fh:
        if header is not None:
            fh.write(f"# seed={header['seed']} config_hash={header['config_hash']}\n")
        w = csv.writer(fh)
        w.writerow(["setting", "n", "p", "method", "rep", "theta_hat", "ci_lo", "ci_hi",
                    "selected_mask"])
        for name, r in report.results.items():
            for i in range(report.reps):
                mask = "".join("1" if b else "0" for b in r.selected[i])
                w.writerow([report.spec.setting, report.spec.n, report.spec.p, name, i,
                            _fmt(r.theta[i]), _fmt(r.ci_lo[i]), _fmt(r.ci_hi[i]), mask])


def _fmt(v):
    return "" if np.isnan(v) else repr(float(v))


def write_report_json(report: McReport, path, header):
    doc = dict(header)
    # wall-clock timings would break byte-for-byte reproducibility
    doc["summary"] = {m: {k: v for k, v in s.items() if k != "runtime_mean"}
                      for m, s in report.summary().items()}
    doc["failures"] = {m: r.failures for m, r in report.results.items() if r.failures}
    with open(path, "w") as fh:
        json.dump(to_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")
