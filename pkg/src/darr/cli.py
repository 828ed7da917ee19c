"""Command-line interface: simulate, fit, cv, bench, predict, preprocess.

Exit codes: 0 success, 2 configuration or data schema error, 3 I/O error,
4 fit written but the outer loop did not converge.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from .benchmark import ROW_COLUMNS, BenchConfig, run_benchmark, summarize
from .data import ConvergenceTrace, ModelFit, ValidationError, validate
from .evaluation import cv_select, prediction_metrics, predict
from .io import (
    ConfigError,
    SchemaError,
    dataclass_fields,
    fmt,
    load_config,
    read_dataset,
    read_table,
    take_section,
    write_dataset,
    write_json,
    write_rows,
)
from .penalty import PenaltySpec
from .robust_init import MAD_CONSISTENCY, PilotConfig, ScatterConfig
from .simulation import DgpConfig, ScenarioConfig, contaminate, generate
from .solver import NotConverged, SolverConfig, fit
from .weighting import WeightFnSpec, WeightState

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NOT_CONVERGED = 0, 2, 3, 4


class NotConvergedExit(Exception):
    pass


# ---------------------------------------------------------------------------
# config sections -> dataclasses
# ---------------------------------------------------------------------------


def _lower_keys(sec: dict) -> dict:
    return {str(k).lower(): v for k, v in sec.items()}


def _build(name, factory, **kwargs):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def dgp_from(cfg: dict, seed: int) -> DgpConfig:
    names = {f.lower(): f for f in dataclass_fields(DgpConfig) if f != "seed"}
    sec = take_section({"dgp": _lower_keys(cfg.get("dgp") or {})}, "dgp", names)
    kwargs = {names[k]: v for k, v in sec.items()}
    for key in ("beta_star", "D_star"):
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = np.asarray(kwargs[key], dtype=float)
    return _build("dgp", DgpConfig, seed=seed, **kwargs)


def scenario_from(cfg: dict) -> ScenarioConfig:
    sec = take_section(cfg, "scenario", ("scenario", "pi"))
    return _build("scenario", ScenarioConfig, **sec)


def _weight_spec(name, sec):
    if sec is None:
        return None
    if not isinstance(sec, dict) or set(sec) - {"family", "cutoff"}:
        raise ConfigError(f"{name}: expected {{family, cutoff}}")
    return _build(name, WeightFnSpec, **sec)


_SOLVER_SCALARS = ("outer_tol", "outer_max_iter", "inner_tol", "inner_max_iter", "lla_steps",
                   "active_set", "variant", "oracle_support", "normalize_leverage", "tau_sel",
                   "residual_scale", "scale_aware_reb", "vc_refine_iter", "vc_steps")
_SOLVER_KEYS = _SOLVER_SCALARS + ("penalty", "weight_residual", "weight_leverage", "pilot", "scatter")


def solver_from(cfg: dict, seed: int) -> SolverConfig:
    sec = take_section(cfg, "solver", _SOLVER_KEYS)
    kwargs = {k: sec[k] for k in _SOLVER_SCALARS if k in sec}
    pen = sec.get("penalty") or {}
    if set(pen) - {"family", "lam", "gamma"}:
        raise ConfigError("solver.penalty: allowed fields are family, lam, gamma")
    kwargs["penalty"] = _build("solver.penalty", PenaltySpec, **pen)
    default = SolverConfig.__dataclass_fields__["weight_family"].default
    phi1 = _weight_spec("solver.weight_residual", sec["weight_residual"]) if "weight_residual" in sec else default[0]
    phi2 = _weight_spec("solver.weight_leverage", sec.get("weight_leverage"))
    if phi1 is None:
        raise ConfigError("solver.weight_residual: may not be null")
    kwargs["weight_family"] = (phi1, phi2)
    if "pilot" in sec:
        kwargs["pilot"] = _build("solver.pilot", PilotConfig, **(sec["pilot"] or {}))
    if "scatter" in sec:
        kwargs["scatter"] = _build("solver.scatter", ScatterConfig, **(sec["scatter"] or {}))
    return _build("solver", SolverConfig, seed=seed, **kwargs)


def cv_opts(cfg: dict) -> dict:
    sec = take_section(cfg, "cv", ("k", "n_lambda", "loss", "rule"))
    out = {"K": int(sec.get("k", 5)), "n_lambda": int(sec.get("n_lambda", 30)),
           "loss": sec.get("loss", "weighted"), "rule": sec.get("rule", "min")}
    if out["K"] < 2 or out["n_lambda"] < 2:
        raise ConfigError("cv: k and n_lambda must be >= 2")
    if out["loss"] not in ("weighted", "mspe") or out["rule"] not in ("min", "1se"):
        raise ConfigError("cv: loss must be weighted|mspe and rule min|1se")
    return out


def bench_from(cfg: dict, seed: int) -> BenchConfig:
    sec = take_section(cfg, "bench", ("r", "scenarios", "pi", "methods", "n_test"))
    cv = cv_opts(cfg)
    kwargs = dict(dgp=dgp_from(cfg, seed), solver=solver_from(cfg, seed), base_seed=seed,
                  K=cv["K"], n_lambda=cv["n_lambda"], cv_loss=cv["loss"], cv_rule=cv["rule"])
    if "r" in sec:
        kwargs["R"] = int(sec["r"])
    if "scenarios" in sec:
        kwargs["scenarios"] = tuple(sec["scenarios"])
    if "methods" in sec:
        kwargs["methods"] = tuple(sec["methods"])
    for k in ("pi", "n_test"):
        if k in sec:
            kwargs[k] = sec[k]
    return _build("bench", BenchConfig, **kwargs)


# ---------------------------------------------------------------------------
# fit serialization
# ---------------------------------------------------------------------------


def fit_to_json(f: ModelFit, time_scale, extra=None) -> dict:
    beta = np.asarray(f.beta, dtype=float)
    sup = f.support
    out = {
        "beta": [float(v) for v in beta],
        "beta_sparse": {str(int(j) + 1): float(beta[j]) for j in sup},
        "support": [int(j) + 1 for j in sup],
        "D_hat": np.asarray(f.D_hat, dtype=float).tolist(),
        "sigma2_hat": float(f.sigma2_hat),
        "delta": float(f.delta),
        "lambda": float(f.lam),
        "variant": f.variant,
        "iterations": int(f.iterations),
        "converged": bool(f.converged),
        "tau_sel": float(f.tau_sel),
        "uses_random_effects": bool(f.uses_random_effects),
        "time_scale": time_scale,
        "trace": f.trace.as_dict(),
    }
    if extra:
        out.update(extra)
    return out


def fit_from_json(doc: dict) -> ModelFit:
    try:
        beta = np.asarray(doc["beta"], dtype=float)
        return ModelFit(
            beta=beta, b_hat=np.zeros((0, len(doc["D_hat"]))), D_hat=np.asarray(doc["D_hat"], dtype=float),
            sigma2_hat=float(doc["sigma2_hat"]), weights=WeightState.unit(0),
            trace=ConvergenceTrace(), iterations=int(doc.get("iterations", 0)),
            lam=float(doc.get("lambda", 0.0)), variant=doc.get("variant", "darr"),
            converged=bool(doc.get("converged", True)), tau_sel=float(doc.get("tau_sel", 1e-8)),
            uses_random_effects=bool(doc.get("uses_random_effects", True)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"fit file: {exc}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _load_data(args, cfg, time_scale=None):
    if not args.data:
        raise ConfigError("--data is required")
    sec = take_section(cfg, "data", ("time_scale",))
    ds, ts = read_dataset(args.data, time_scale or sec.get("time_scale"))
    try:
        validate(ds)
    except ValidationError as exc:
        raise SchemaError(f"{args.data}: {exc}") from None
    return ds, ts


def cmd_simulate(args, cfg) -> int:
    dgp = dgp_from(cfg, args.seed)
    scenario = scenario_from(cfg)
    out = _out_dir(args)
    ds, truth = generate(dgp)
    ds, truth = contaminate(ds, truth, scenario, args.seed)
    write_dataset(os.path.join(out, "data.csv"), ds)
    write_json(os.path.join(out, "truth.json"), {
        "beta_star": truth.beta_star.tolist(),
        "support": [int(j) + 1 for j in truth.support],
        "D_star": truth.D_star.tolist(),
        "sigma_eps": truth.sigma_eps,
        "b": truth.b.tolist(),
        "scenario": scenario.scenario,
        "pi": scenario.pi,
        "contaminated": [int(i) for i in truth.contaminated],
        "contaminated_level": truth.contaminated_level,
        "seed": args.seed,
    })
    return EXIT_OK


def _select_fit(ds, cfg, scfg):
    """Fit at the configured lambda, or at the CV choice when select = cv."""
    sec = take_section(cfg, "fit", ("select", "write_weights"))
    select = sec.get("select", "cv" if scfg.penalized else "fixed")
    if select not in ("cv", "fixed"):
        raise ConfigError("fit.select must be cv or fixed")
    if select == "cv" and scfg.penalized:
        o = cv_opts(cfg)
        cv = cv_select(ds, scfg, o["K"], o["n_lambda"], loss=o["loss"], rule=o["rule"])
        return cv.best_fit, {"cv_lambda": cv.lambda_best, "fold_hash": cv.fold_hash}, sec
    try:
        return fit(ds, scfg), {}, sec
    except NotConverged as exc:
        return exc.fit, {}, sec


def cmd_fit(args, cfg) -> int:
    scfg = solver_from(cfg, args.seed)
    ds, ts = _load_data(args, cfg)
    out = _out_dir(args)
    f, extra, sec = _select_fit(ds, cfg, scfg)
    write_json(os.path.join(out, "fit.json"), fit_to_json(f, ts, extra))
    if sec.get("write_weights", True):
        rows = [[str(ds.ids[i]), fmt(ds.times[r]), fmt(f.weights.weights[r]),
                 fmt(f.weights.residuals[r]), fmt(f.weights.leverage[r])]
                for r, i in enumerate(ds.subject_index)]
        write_rows(os.path.join(out, "weights.csv"),
                   ["subject_id", "time", "weight", "residual", "leverage"], rows)
    if not f.converged:
        raise NotConvergedExit(f"outer loop hit {f.iterations} iterations; fit written and flagged")
    return EXIT_OK


def cmd_cv(args, cfg) -> int:
    scfg = solver_from(cfg, args.seed)
    ds, _ = _load_data(args, cfg)
    out = _out_dir(args)
    o = cv_opts(cfg)
    cv = cv_select(ds, scfg, o["K"], o["n_lambda"], loss=o["loss"], rule=o["rule"])
    se = cv.fold_losses.std(axis=0, ddof=1) / math.sqrt(cv.fold_losses.shape[0])
    rows = [[j, float(lam), float(cv.curve[j]), float(se[j]), int(f.support.size)]
            for j, (lam, f) in enumerate(cv.path)]
    write_rows(os.path.join(out, "cv_curve.csv"), ["index", "lambda", "loss", "se", "model_size"], rows)
    write_json(os.path.join(out, "cv.json"), {
        "lambda_best": cv.lambda_best, "best_index": cv.best_index, "K": int(cv.fold_losses.shape[0]),
        "n_lambda": int(cv.lambdas.size), "loss": o["loss"], "rule": o["rule"],
        "fold_hash": cv.fold_hash, "folds": [int(k) for k in cv.folds], "seed": args.seed,
    })
    return EXIT_OK


def cmd_bench(args, cfg) -> int:
    bcfg = bench_from(cfg, args.seed)
    out = _out_dir(args)
    rows = run_benchmark(bcfg, threads=args.threads)
    write_rows(os.path.join(out, "metrics.csv"), ROW_COLUMNS,
               [[r[c] if not isinstance(r[c], (np.floating,)) else float(r[c]) for c in ROW_COLUMNS] for r in rows])
    summary = summarize(rows)
    cols = list(summary[0].keys()) if summary else ["scenario", "method"]
    write_rows(os.path.join(out, "summary.csv"), cols, [[rec[c] for c in cols] for rec in summary])
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    if not args.fit:
        raise ConfigError("--fit is required")
    with open(args.fit) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.fit}: line {exc.lineno}: {exc.msg}") from None
    f = fit_from_json(doc)
    ds, _ = _load_data(args, cfg, doc.get("time_scale"))
    if ds.p != f.beta.size:
        raise SchemaError(f"{args.data}: has {ds.p} x columns, the fit has {f.beta.size}")
    out = _out_dir(args)
    yhat = predict(f, ds)
    rows = [[str(ds.ids[i]), fmt(ds.times[r]), fmt(ds.Y[r]), fmt(yhat[r])]
            for r, i in enumerate(ds.subject_index)]
    write_rows(os.path.join(out, "predictions.csv"), ["subject_id", "time", "y", "yhat"], rows)
    write_json(os.path.join(out, "prediction_metrics.json"), prediction_metrics(f, ds).as_dict())
    return EXIT_OK


def cmd_preprocess(args, cfg) -> int:
    """Median imputation and median/MAD standardization of the x columns.

    Statistics come from ``--data`` unless ``--transform`` supplies a saved
    transform, which is then applied unchanged (validation/test data).
    """
    if not args.data:
        raise ConfigError("--data is required")
    ids, times, y, X, Z = read_table(args.data, allow_missing_x=True)
    if args.transform:
        with open(args.transform) as fh:
            doc = json.load(fh)
        center = np.asarray(doc["center"], dtype=float)
        scale = np.asarray(doc["scale"], dtype=float)
        if center.size != X.shape[1]:
            raise SchemaError(f"{args.data}: {X.shape[1]} x columns, transform has {center.size}")
    else:
        center = np.nanmedian(X, axis=0)
        if np.any(np.isnan(center)):
            bad = (np.flatnonzero(np.isnan(center)) + 1).tolist()
            raise SchemaError(f"{args.data}: x columns {bad} have no observed values")
        dev = np.abs(X - center)
        scale = MAD_CONSISTENCY * np.nanmedian(dev, axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        doc = {"center": center.tolist(), "scale": scale.tolist(), "impute": "median",
               "n_rows": int(X.shape[0])}
    n_missing = int(np.isnan(X).sum())
    Xt = (np.where(np.isnan(X), center, X) - center) / scale
    out = _out_dir(args)
    header = ["subject_id", "time", "y"] + [f"x_{j + 1}" for j in range(X.shape[1])]
    if Z is not None:
        header += [f"z_{j + 1}" for j in range(Z.shape[1])]
    rows = []
    for r in range(Xt.shape[0]):
        row = [ids[r], fmt(times[r]), fmt(y[r])] + [fmt(v) for v in Xt[r]]
        if Z is not None:
            row += [fmt(v) for v in Z[r]]
        rows.append(row)
    write_rows(os.path.join(out, "data.csv"), header, rows)
    write_json(os.path.join(out, "transform.json"), dict(doc, n_imputed=n_missing))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "cv": cmd_cv,
    "bench": cmd_bench,
    "predict": cmd_predict,
    "preprocess": cmd_preprocess,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="darr", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--data", help="long-format CSV input")
        sp.add_argument("--out", help="output directory (default: .)")
        sp.add_argument("--seed", type=int, default=None, help="global seed (overrides config)")
        sp.add_argument("--threads", type=int, default=None, help="worker processes for bench")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "predict":
            sp.add_argument("--fit", help="fit.json from the fit command")
        if name == "preprocess":
            sp.add_argument("--transform", help="apply a saved transform.json instead of fitting one")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        threads = args.threads if args.threads is not None else cfg.get("threads", 1)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if not isinstance(threads, int) or threads < 1:
            raise ConfigError("threads must be a positive integer")
        args.seed, args.threads = seed, threads
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NotConvergedExit as exc:
        print(f"warning: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
