"""Command-line front end: ``oarf simulate | estimate | tune | mse-curve | fetch``."""
import argparse
import csv
import json
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import estimators as est
from .adaptive import RRF_PENALTY, PenaltyConfig
from .forest import ForestConfig
from .io import IngestConfig, fetch, load_csv
from .simlab import (DgpSpec, MethodSettings, mse_vs_n, report_header, run_monte_carlo,
                     write_report_csv, write_report_json)
from .util import config_hash, to_jsonable

COMMANDS = ("simulate", "estimate", "tune", "mse-curve", "fetch")
ESTIMATE_METHODS = ("oarf", "rrf", "rf-full", "lo-full", "oal", "dml-full", "dml-oarf", "doarf")


@dataclass
class RunConfig:
    """Everything one command needs; mirrors the command-line flags."""

    command: str
    seed: int
    methods: list = field(default_factory=lambda: ["oarf"])
    forest: ForestConfig = ForestConfig()
    penalty: PenaltyConfig = PenaltyConfig()
    oal: est.OalConfig = est.OalConfig()
    k: int = 2
    bootstrap: int = 0
    data: Optional[str] = None
    outcome: Optional[str] = None
    treatment: Optional[str] = None
    ingest: IngestConfig = IngestConfig()
    out: Optional[str] = None
    setting: int = 1
    n: int = 500
    p: int = 20
    rho: Optional[float] = None
    theta: float = 0.5
    reps: int = 100
    n_grid: list = field(default_factory=lambda: [200, 1000, 4000])
    dataset: Optional[str] = None

    def validate(self):
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}")
        if self.seed is None:
            raise ValueError("--seed is mandatory")
        if self.command in ("estimate", "tune"):
            if not self.data or not os.path.exists(self.data):
                raise FileNotFoundError(f"input data {self.data!r} does not exist")
            if not self.outcome or not self.treatment:
                raise ValueError("--outcome and --treatment are required")
        if self.command == "estimate":
            bad = [m for m in self.methods if m not in ESTIMATE_METHODS]
            if bad:
                raise ValueError(f"unknown method(s) {bad}; known: {list(ESTIMATE_METHODS)}")
        if self.command == "fetch" and not self.dataset:
            raise ValueError("--dataset is required")
        return self

    def oarf_config(self):
        return est.OarfConfig(self.forest, self.forest, self.penalty, self.k)

    def hash(self):
        cfg = to_jsonable(self)
        cfg.pop("out", None)
        return config_hash(cfg)


def build_parser():
    ap = argparse.ArgumentParser(prog="oarf", description="Outcome-adaptive random forests")
    ap.add_argument("--config", help="JSON file whose keys mirror the flags")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, required=False)
        p.add_argument("--out", help="output file (estimate/tune) or directory")
        p.add_argument("--trees", type=int, default=500)
        p.add_argument("--mtry", type=int)
        p.add_argument("--min-node-size", type=int, default=10)
        p.add_argument("--entry-rule", default="parent", choices=["positive", "dominant", "parent"])
        p.add_argument("--depth-exponent", action="store_true")
        p.add_argument("--folds", type=int, default=2)
        p.add_argument("--threads", type=int, help="sets OARF_THREADS")

    s = sub.add_parser("simulate", help="Monte Carlo study of one setting")
    common(s)
    s.add_argument("--setting", type=int, default=1)
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--p", type=int, default=20)
    s.add_argument("--rho", type=float)
    s.add_argument("--theta", type=float, default=0.5)
    s.add_argument("--reps", type=int, default=100)
    s.add_argument("--methods", default="oarf,rf-full")
    s.add_argument("--bootstrap", type=int, default=0)

    m = sub.add_parser("mse-curve", help="MSE across sample sizes")
    common(m)
    m.add_argument("--setting", type=int, default=5)
    m.add_argument("--p", type=int, default=20)
    m.add_argument("--n-grid", default="200,1000,4000")
    m.add_argument("--reps", type=int, default=100)
    m.add_argument("--methods", default="oarf,rf-full")

    for name, helptext in (("estimate", "effect estimate on a CSV file"),
                           ("tune", "wAMD tuning of the OARF propensity forest")):
        e = sub.add_parser(name, help=helptext)
        common(e)
        e.add_argument("--data", required=False)
        e.add_argument("--outcome")
        e.add_argument("--treatment")
        e.add_argument("--treated-value")
        e.add_argument("--outcome-positive")
        e.add_argument("--drop", default="", help="comma-separated columns to ignore")
        e.add_argument("--missing-threshold", type=float, default=0.5)
        if name == "estimate":
            e.add_argument("--method", default="oarf")
            e.add_argument("--bootstrap", type=int, default=0)

    f = sub.add_parser("fetch", help="download an empirical dataset")
    f.add_argument("--dataset", choices=["rhc", "birthweight"])
    f.add_argument("--dest", default="data")
    f.add_argument("--seed", type=int, default=0)
    return ap


def _split(text):
    return [t for t in str(text).split(",") if t]


def config_from_args(argv):
    """Parse flags (and an optional JSON config file) into a RunConfig."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    parser = build_parser()
    if known.config:
        with open(known.config) as fh:
            file_cfg = json.load(fh)
        for action in parser._subparsers._group_actions:
            for sp in action.choices.values():
                sp.set_defaults(**{k.replace("-", "_"): v for k, v in file_cfg.items()})
    a = parser.parse_args(argv)
    if a.command == "fetch":
        return RunConfig("fetch", a.seed, dataset=a.dataset, out=a.dest).validate()
    if a.threads:
        os.environ["OARF_THREADS"] = str(a.threads)
    forest = ForestConfig(num_trees=a.trees, mtry=a.mtry, min_node_size=a.min_node_size)
    penalty = PenaltyConfig(entry_rule=a.entry_rule, depth_exponent=a.depth_exponent)
    cfg = RunConfig(a.command, a.seed, forest=forest, penalty=penalty, k=a.folds, out=a.out)
    if a.command in ("simulate", "mse-curve"):
        cfg.methods = _split(a.methods)
        cfg.setting, cfg.p, cfg.reps = a.setting, a.p, a.reps
        if a.command == "simulate":
            cfg.n, cfg.rho, cfg.theta, cfg.bootstrap = a.n, a.rho, a.theta, a.bootstrap
        else:
            cfg.n_grid = [int(v) for v in _split(a.n_grid)]
    else:
        cfg.data, cfg.outcome, cfg.treatment = a.data, a.outcome, a.treatment
        cfg.ingest = IngestConfig(a.missing_threshold, a.treated_value, a.outcome_positive,
                                  tuple(_split(a.drop)))
        if a.command == "estimate":
            cfg.methods = _split(a.method)
            cfg.bootstrap = a.bootstrap
    return cfg.validate()


# -- commands -------------------------------------------------------------------

def _pipeline(cfg: RunConfig, method):
    oc = cfg.oarf_config()
    if method == "oarf":
        return lambda d, s: est.oarf_ate(d, oc, s)
    if method == "rrf":
        return lambda d, s: replace(est.oarf_ate(d, replace(oc, penalty=RRF_PENALTY), s),
                                    method="rrf")
    if method == "rf-full":
        return lambda d, s: est.rf_full_ate(d, cfg.forest, s, cfg.k)
    if method == "lo-full":
        return lambda d, s: est.fit_logistic_ipw(d)
    if method == "oal":
        return lambda d, s: est.fit_oal(d, cfg.oal)
    return lambda d, s: est.dml_variant(d, method, oc, s)


def _write_json(path, doc):
    text = json.dumps(to_jsonable(doc), indent=2, sort_keys=True) + "\n"
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            fh.write(text)
    return text


def cmd_estimate(cfg: RunConfig):
    data, ingest = load_csv(cfg.data, cfg.outcome, cfg.treatment, cfg.ingest)
    docs = []
    for method in cfg.methods:
        pipe = _pipeline(cfg, method)
        if cfg.bootstrap > 0:
            res = est.with_bootstrap(data, pipe, cfg.bootstrap, cfg.seed)
            props = res.diagnostics.get("bootstrap_inclusion")
        else:
            res = pipe(data, cfg.seed)
            props = None
        if props is None and res.selected is not None:
            props = res.selected.astype(float)
        selected = [] if props is None else [
            {"name": data.names[j], "proportion": float(props[j])}
            for j in np.argsort(-np.asarray(props), kind="stable") if props[j] > 0]
        diag = res.diagnostics
        docs.append({
            "method": method, "theta": res.theta,
            "ci": [res.ci_lower, res.ci_upper], "n": data.n,
            "p_used": int(np.sum(res.selected)) if res.selected is not None else data.p,
            "selected": selected,
            "diagnostics": {"wamd": diag.get("wamd"), "clip_rate": diag.get("clip_rate"),
                            "seed": cfg.seed, "config_hash": cfg.hash()},
        })
    doc = docs[0] if len(docs) == 1 else {"results": docs}
    doc_full = dict(doc, ingest=asdict(ingest))
    _write_json(cfg.out, doc_full)
    for d in docs:
        lo, hi = d["ci"]
        ci = "" if lo is None or np.isnan(lo) else f"  95% CI [{lo:.4f}, {hi:.4f}]"
        print(f"{d['method']:9s} ATE {d['theta']:.4f}{ci}  covariates used {d['p_used']}/{data.p}")
    print(f"rows {ingest.rows_retained}/{ingest.rows_read} kept; "
          f"columns dropped for missingness: {ingest.columns_dropped or 'none'}")
    return doc_full


def cmd_tune(cfg: RunConfig):
    data, _ = load_csv(cfg.data, cfg.outcome, cfg.treatment, cfg.ingest)
    grid = [(m, ns, t) for m in (2, 4, 6) for ns in (5, 10, 20) for t in (100, 500)
            if m <= data.p]
    best, res, table = est.tune_oarf(data, grid, cfg.oarf_config(), cfg.seed)
    doc = {"best": {"mtry": best[0], "min_node_size": best[1], "num_trees": best[2]},
           "theta": res.theta, "grid": [{"mtry": g[0], "min_node_size": g[1], "num_trees": g[2],
                                         "wamd": w} for g, w in table],
           "seed": cfg.seed, "config_hash": cfg.hash()}
    _write_json(cfg.out, doc)
    print(f"best mtry={best[0]} min_node_size={best[1]} trees={best[2]}  ATE {res.theta:.4f}")
    return doc


def _settings(cfg):
    return MethodSettings(oarf=cfg.oarf_config(), forest=cfg.forest, oal=cfg.oal, k=cfg.k)


def cmd_simulate(cfg: RunConfig):
    spec = DgpSpec(cfg.setting, cfg.n, cfg.p, cfg.theta, cfg.rho)
    report = run_monte_carlo(spec, cfg.methods, cfg.reps, with_ci=cfg.bootstrap > 0,
                             seed=cfg.seed, n_boot=max(cfg.bootstrap, 1), settings=_settings(cfg))
    header = report_header(report, _settings(cfg), {"config_hash_run": cfg.hash()})
    out = cfg.out or "."
    os.makedirs(out, exist_ok=True)
    stem = os.path.join(out, f"setting{cfg.setting}_n{cfg.n}")
    write_report_json(report, stem + ".json", header)
    write_report_csv(report, stem + ".csv", header)
    for name, s in report.summary().items():
        extra = ""
        if "coverage" in s:
            extra = f" coverage {s['coverage']:.2f} width {s['width']:.3f}"
        print(f"{name:9s} bias {s.get('bias', float('nan')):+.4f} var {s.get('variance', float('nan')):.4f} "
              f"mse {s.get('mse', float('nan')):.4f}{extra} failures {s['failures']}")
    return report


def cmd_mse_curve(cfg: RunConfig):
    spec = DgpSpec(cfg.setting, cfg.n_grid[0], cfg.p)
    rows = mse_vs_n(spec, cfg.n_grid, cfg.methods, cfg.reps, cfg.seed, _settings(cfg))
    out = cfg.out or "."
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, f"mse_setting{cfg.setting}.csv")
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={cfg.seed} config_hash={cfg.hash()}\n")
        w = csv.DictWriter(fh, ["setting", "n", "method", "bias", "var", "mse"])
        w.writeheader()
        w.writerows(rows)
    _write_json(path[:-4] + ".json", {"seed": cfg.seed, "config_hash": cfg.hash(), "rows": rows})
    for r in rows:
        print(f"n={r['n']:6d} {r['method']:9s} mse {r['mse']:.4f}")
    return rows


def run(cfg: RunConfig):
    cfg.validate()
    if cfg.command == "fetch":
        path = fetch(cfg.dataset, cfg.out or "data")
        print(path)
        return path
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return {"estimate": cmd_estimate, "tune": cmd_tune, "simulate": cmd_simulate,
                "mse-curve": cmd_mse_curve}[cfg.command](cfg)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = config_from_args(argv)
        run(cfg)
    except SystemExit:
        raise
    except Exception as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
