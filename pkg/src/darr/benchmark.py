"""Monte Carlo benchmark: scenarios x methods x replications, with per-row
metrics and a summary table."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .evaluation import cv_select, estimation_metrics, prediction_metrics
from .simulation import DgpConfig, ScenarioConfig, contaminate, generate, generate_test_set
from .solver import NotConverged, SolverConfig, fit

log = logging.getLogger(__name__)

METHODS = ("darr", "nonrobust_penalized", "robust_unpenalized", "oracle_restricted", "marginal_lasso")
PENALIZED = ("darr", "nonrobust_penalized", "marginal_lasso")

METRIC_COLUMNS = ("MSE_S", "MSE_Sc", "MSPE", "TP", "FP", "COV_F", "MAE", "RMSE", "MedAE",
                  "SQERR", "LAMBDA", "ITER", "CONVERGED")
ROW_COLUMNS = ("replication", "seed", "scenario", "method", "status", "error") + METRIC_COLUMNS
SCALED = ("MSE_S", "MSE_Sc", "MSPE", "COV_F")
SUMMARY_COLUMNS = ("MSE_S", "MSE_Sc", "MSPE", "TP", "FP", "COV_F")


@dataclass(frozen=True, eq=False)
class BenchConfig:
    dgp: DgpConfig = field(default_factory=DgpConfig)
    scenarios: tuple = ("S1", "S2", "S3")
    pi: float = 0.1
    R: int = 20
    methods: tuple = METHODS
    K: int = 5
    n_lambda: int = 30
    cv_loss: str = "weighted"
    cv_rule: str = "min"
    n_test: int = 100
    base_seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}")
        if self.R < 1:
            raise ValueError("R must be >= 1")
        for sc in self.scenarios:
            ScenarioConfig(sc, self.pi)


def method_config(base: SolverConfig, method: str, support) -> SolverConfig:
    if method == "oracle_restricted":
        return replace(base, variant=method, oracle_support=tuple(int(j) for j in support))
    cfg = replace(base, variant=method, oracle_support=None)
    if method in ("robust_unpenalized",):
        cfg = cfg.with_lambda(0.0)
    return cfg


def _run_method(cfg: BenchConfig, method, train, truth, test) -> dict:
    scfg = method_config(cfg.solver, method, truth.support)
    converged = True
    if method in PENALIZED:
        cv = cv_select(train, scfg, cfg.K, cfg.n_lambda, loss=cfg.cv_loss, rule=cfg.cv_rule)
        result, lam = cv.best_fit, cv.lambda_best
        converged = result.converged
    else:
        try:
            result = fit(train, scfg)
        except NotConverged as exc:
            result, converged = exc.fit, False
        lam = 0.0
    est = estimation_metrics(result, truth)
    pred = prediction_metrics(result, test)
    err = result.beta - truth.beta_star
    return {
        "MSE_S": est.mse_active, "MSE_Sc": est.mse_inactive, "MSPE": pred.mspe,
        "TP": est.tp, "FP": est.fp,
        "COV_F": est.cov_frobenius if est.cov_frobenius is not None else math.nan,
        "MAE": pred.mae, "RMSE": pred.rmse, "MedAE": pred.medae,
        "SQERR": float(err @ err), "LAMBDA": lam, "ITER": result.iterations,
        "CONVERGED": int(converged),
    }


def run_replication(cfg: BenchConfig, r: int) -> list:
    """All scenarios and methods for replication ``r``; failures become error rows."""
    seed = cfg.base_seed + r
    rows = []
    with threadpool_limits(1):
        dgp = replace(cfg.dgp, seed=seed)
        clean, truth0 = generate(dgp)
        test, _ = generate_test_set(dgp, cfg.n_test, seed)
        for sc in cfg.scenarios:
            train, truth = contaminate(clean, truth0, ScenarioConfig(sc, cfg.pi), seed)
            for method in cfg.methods:
                row = {"replication": r, "seed": seed, "scenario": sc, "method": method}
                try:
                    row.update(status="ok", error="", **_run_method(cfg, method, train, truth, test))
                except Exception as exc:  # keep the benchmark going
                    log.warning("replication %d %s %s failed: %s", r, sc, method, exc)
                    row.update(status="error", error=f"{type(exc).__name__}: {exc}",
                               **{c: math.nan for c in METRIC_COLUMNS})
                rows.append(row)
    return rows


def _replication_job(args):
    return run_replication(*args)


def run_benchmark(cfg: BenchConfig, threads: int = 1) -> list:
    """Rows ordered by (replication, scenario, method) regardless of ``threads``."""
    jobs = [(cfg, r) for r in range(cfg.R)]
    if threads <= 1:
        chunks = [run_replication(*j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_replication_job, jobs))
    return [row for chunk in chunks for row in chunk]


def summarize(rows) -> list:
    """Mean, sd and median per (scenario, method); MSE-type columns times 1e3."""
    out = []
    keys = []
    for row in rows:
        k = (row["scenario"], row["method"])
        if k not in keys:
            keys.append(k)
    for sc, method in keys:
        cell = [r for r in rows if r["scenario"] == sc and r["method"] == method and r["status"] == "ok"]
        rec = {"scenario": sc, "method": method, "n_ok": len(cell)}
        for col in SUMMARY_COLUMNS:
            vals = np.array([r[col] for r in cell], dtype=float)
            if col in SCALED:
                vals = vals * 1e3
            vals = vals[~np.isnan(vals)]
            if vals.size:
                rec[f"{col}_mean"] = float(np.mean(vals))
                rec[f"{col}_sd"] = float(np.std(vals, ddof=1)) if vals.size > 1 else math.nan
                rec[f"{col}_median"] = float(np.median(vals))
            else:
                rec[f"{col}_mean"] = rec[f"{col}_sd"] = rec[f"{col}_median"] = math.nan
        out.append(rec)
    return out
