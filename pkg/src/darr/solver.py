"""Coordinate-descent M-step, the reweighted EM outer loop and the
regularization path.

The outer loop alternates

1. weights from standardized residuals, leverage and the discrepancy factor,
2. random effects and variance components given the weights,
3. a penalized least-squares update of beta, by default on the profiled
   objective with the random effects eliminated (``mstep="profiled"``), or
   on the working responses ``Y - Z b`` with the random effects held fixed
   (``mstep="conditional"``),

until the relative change of beta falls below ``outer_tol``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numba
import numpy as np

from .data import ConvergenceTrace, ModelFit, SELECTION_TAU, validate
from .mixed_effects import (
    profiled_loss,
    profiled_whiten,
    reb_update_all,
    refine_variance_components,
    update_D,
    update_sigma2,
)
from .penalty import LASSO, PenaltySpec, _derivative, _prox, _soft, _value, penalty_total
from .robust_init import MAD_CONSISTENCY, SIGMA_FLOOR, mad, PilotConfig, PilotEstimates, ScatterConfig, pilot_fit, robust_location_scatter
from .weighting import (
    WeightFnSpec,
    WeightState,
    compute_weights,
    default_leverage_spec,
    discrepancy_factor,
    leverage_distances,
    standardized_residuals,
)

log = logging.getLogger(__name__)

VARIANTS = ("darr", "nonrobust_penalized", "robust_unpenalized", "oracle_restricted", "marginal_lasso")


class NotConverged(RuntimeError):
    """Outer iteration cap reached; the partial fit is attached as ``.fit``."""

    def __init__(self, fit: ModelFit):
        super().__init__(
            f"no convergence after {fit.iterations} iterations "
            f"(last relative change {fit.trace.rel_change[-1]:.3g})"
        )
        self.fit = fit
        self.trace = fit.trace


@dataclass(frozen=True)
class SolverConfig:
    penalty: PenaltySpec = field(default_factory=lambda: PenaltySpec("scad", 0.0))
    outer_tol: float = 1e-4
    outer_max_iter: int = 50
    inner_tol: float = 1e-6
    inner_max_iter: int = 10_000
    lla_steps: int = 2
    active_set: bool = True
    # (residual weight, leverage weight); None means bisquare with cutoff chi2_.99(p)/p
    weight_family: tuple = (WeightFnSpec("bisquare", 1.0), None)
    variant: str = "darr"
    oracle_support: Optional[tuple] = None
    seed: int = 0
    normalize_leverage: bool = True
    pilot: PilotConfig = field(default_factory=PilotConfig)
    scatter: ScatterConfig = field(default_factory=ScatterConfig)
    tau_sel: float = SELECTION_TAU
    pin_delta: Optional[float] = None  # testing hook: fixes the discrepancy factor
    # after convergence, iterate the D update to its fixed point at the final beta
    vc_refine_iter: int = 2000
    # (REB, D, sigma2) update passes per E-step; 1 is the plain EM step
    vc_steps: int = 20
    # residual scale for the weights: "mad" of the current residuals or the "moment" update
    residual_scale: str = "mad"
    # error variance enters the random-effect posterior (False: unit-variance form)
    scale_aware_reb: bool = True
    # beta update: "profiled" (random effects eliminated) or "conditional" (Y - Z b)
    mstep: str = "profiled"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not (self.outer_tol > 0 and self.inner_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.mstep not in ("profiled", "conditional"):
            raise ValueError(f"unknown mstep {self.mstep!r}")
        if self.residual_scale not in ("mad", "moment"):
            raise ValueError(f"unknown residual_scale {self.residual_scale!r}")
        if self.outer_max_iter < 1 or self.inner_max_iter < 1 or self.lla_steps < 1:
            raise ValueError("iteration caps must be >= 1")
        if (self.oracle_support is None) == (self.variant == "oracle_restricted"):
            raise ValueError("oracle_support is required exactly when variant='oracle_restricted'")
        if self.oracle_support is not None:
            object.__setattr__(self, "oracle_support", tuple(int(j) for j in self.oracle_support))

    def with_lambda(self, lam: float) -> "SolverConfig":
        return replace(self, penalty=self.penalty.with_lambda(lam))

    @property
    def uses_weights(self) -> bool:
        return self.variant in ("darr", "robust_unpenalized")

    @property
    def uses_random_effects(self) -> bool:
        return self.variant != "marginal_lasso"

    @property
    def penalized(self) -> bool:
        return self.variant in ("darr", "nonrobust_penalized", "marginal_lasso")

    def effective_penalty(self) -> PenaltySpec:
        if not self.penalized:
            return PenaltySpec("lasso", 0.0)
        if self.variant == "marginal_lasso":
            return PenaltySpec("lasso", self.penalty.lam)
        return self.penalty

    def weight_specs(self, p: int):
        phi1, phi2 = self.weight_family
        return phi1, (phi2 if phi2 is not None else default_leverage_spec(p))


# ---------------------------------------------------------------------------
# coordinate descent kernel
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _sweep(coords, Xf, w, r, beta, a, lam, family, gamma, anchor, N, pinned):
    """One cyclic pass over ``coords``; returns (max |change|, fallback count)."""
    n_rows = Xf.shape[0]
    max_change = 0.0
    n_fallback = 0
    for jj in range(coords.shape[0]):
        j = coords[jj]
        old = beta[j]
        if pinned[j] or a[j] <= 0.0:
            new = 0.0
        else:
            g = 0.0
            for i in range(n_rows):
                g += w[i] * Xf[i, j] * r[i]
            u = (g + a[j] * old) / a[j]
            z = 2.0 * a[j] / N
            new, ok = _prox(z, u, lam[j], family, gamma)
            if not ok:
                # local linear approximation at the anchor: weighted soft threshold
                omega = _derivative(abs(anchor[j]), lam[j], family, gamma)
                new = _soft(z * u, omega, z)
                n_fallback += 1
        d = new - old
        if d != 0.0:
            for i in range(n_rows):
                r[i] -= d * Xf[i, j]
            beta[j] = new
            if abs(d) > max_change:
                max_change = abs(d)
    return max_change, n_fallback


@numba.njit(cache=True)
def _objective(w, r, beta, lam, family, gamma, N):
    loss = 0.0
    for i in range(r.shape[0]):
        loss += w[i] * r[i] * r[i]
    pen = 0.0
    for j in range(beta.shape[0]):
        pen += _value(abs(beta[j]), lam[j], family, gamma)
    return loss + N * pen


@numba.njit(cache=True)
def _cd(Xf, w, r, beta, a, lam, family, gamma, anchor, N, pinned, tol, max_sweeps,
        active_set, history):
    """Coordinate descent to convergence; returns (sweeps, fallbacks, converged)."""
    p = beta.shape[0]
    all_coords = np.arange(p)
    sweeps = 0
    fallbacks = 0
    while sweeps < max_sweeps:
        change, fb = _sweep(all_coords, Xf, w, r, beta, a, lam, family, gamma, anchor, N, pinned)
        history[sweeps] = _objective(w, r, beta, lam, family, gamma, N)
        sweeps += 1
        fallbacks += fb
        if change <= tol:
            return sweeps, fallbacks, True
        if active_set:
            active = np.flatnonzero(beta != 0.0)
            while sweeps < max_sweeps:
                change, fb = _sweep(active, Xf, w, r, beta, a, lam, family, gamma, anchor, N, pinned)
                history[sweeps] = _objective(w, r, beta, lam, family, gamma, N)
                sweeps += 1
                fallbacks += fb
                if change <= tol:
                    break
    return sweeps, fallbacks, False


@dataclass(frozen=True, eq=False)
class MStepResult:
    beta: np.ndarray
    sweeps: int
    fallbacks: int
    converged: bool
    history: np.ndarray  # objective after each sweep (sum w r^2 + N * penalty)


def m_step(dataset, working_Y, weights, penalty: PenaltySpec, beta_init, cfg: SolverConfig,
           pinned=None, return_info: bool = False):
    """Minimize sum w (Y* - X beta)^2 + N * sum pen(|beta_j|) by coordinate descent.

    Coordinates whose scalar problem is nonconvex fall back to a weighted
    soft threshold (LLA) anchored at the iterate at the start of each of the
    ``cfg.lla_steps`` passes. Coordinates with no weighted information are
    pinned to zero.
    """
    w = np.ascontiguousarray(weights.weights if isinstance(weights, WeightState) else weights,
                             dtype=float)
    Xf = dataset.Xf
    p = dataset.p
    N = float(dataset.N)
    beta = np.array(beta_init, dtype=float, copy=True)
    pin = np.zeros(p, dtype=np.bool_) if pinned is None else np.asarray(pinned, dtype=np.bool_).copy()
    a = np.einsum("ij,ij,i->j", Xf, Xf, w)
    if np.any((a <= 0) & ~pin):
        log.debug("pinning %d zero-information coordinates", int(np.sum((a <= 0) & ~pin)))
    beta[pin | (a <= 0)] = 0.0
    lam = penalty.lam * penalty.coord_weights(p)
    family = penalty.code
    if penalty.lam == 0.0:
        family = LASSO
    r = np.ascontiguousarray(working_Y, dtype=float) - dataset.X @ beta
    history_parts = []
    sweeps = fallbacks = 0
    converged = False
    for _ in range(cfg.lla_steps):
        anchor = beta.copy()
        hist = np.empty(cfg.inner_max_iter)
        s, fb, converged = _cd(Xf, w, r, beta, a, lam, family, penalty.gamma, anchor, N, pin,
                               cfg.inner_tol, cfg.inner_max_iter, cfg.active_set, hist)
        sweeps += s
        fallbacks += fb
        history_parts.append(hist[:s])
        if fb == 0:
            break
    if fallbacks:
        log.debug("LLA fallback used %d times", fallbacks)
    if not return_info:
        return beta
    return MStepResult(beta, sweeps, fallbacks, converged, np.concatenate(history_parts))


def m_step_objective(dataset, working_Y, weights, penalty: PenaltySpec, beta) -> float:
    w = weights.weights if isinstance(weights, WeightState) else np.asarray(weights, dtype=float)
    r = np.asarray(working_Y, dtype=float) - dataset.X @ np.asarray(beta, dtype=float)
    return float(np.sum(w * r * r)) + dataset.N * penalty_total(penalty, beta)


def m_step_gradient(dataset, working_Y, weights, beta) -> np.ndarray:
    """Gradient of the smooth part sum w (Y* - X beta)^2."""
    w = weights.weights if isinstance(weights, WeightState) else np.asarray(weights, dtype=float)
    r = np.asarray(working_Y, dtype=float) - dataset.X @ np.asarray(beta, dtype=float)
    return -2.0 * dataset.X.T @ (w * r)


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Prepared:
    """Data-dependent quantities fixed across outer iterations and lambdas."""

    pilot: PilotEstimates
    scatter: object
    leverage: np.ndarray  # score fed to the leverage weight (d^2/p by default)
    pinned: np.ndarray


@dataclass(frozen=True, eq=False)
class StartState:
    beta: np.ndarray
    b: np.ndarray
    sigma: float
    D: np.ndarray


def prepare(dataset, cfg: SolverConfig) -> Prepared:
    validate(dataset)
    pilot = pilot_fit(dataset, cfg.pilot)
    scatter = None
    leverage = np.zeros(dataset.N)
    if cfg.uses_weights:
        scatter = robust_location_scatter(dataset.X, replace(cfg.scatter, seed=cfg.seed))
        leverage = leverage_distances(dataset, scatter)
        if cfg.normalize_leverage:
            leverage = leverage / dataset.p
    pinned = np.zeros(dataset.p, dtype=bool)
    if cfg.variant == "oracle_restricted":
        pinned[:] = True
        pinned[list(cfg.oracle_support)] = False
    return Prepared(pilot, scatter, leverage, pinned)


def pilot_start(dataset, cfg: SolverConfig, prep: Prepared) -> StartState:
    pilot = prep.pilot
    beta = np.where(prep.pinned, 0.0, pilot.beta)
    b = pilot.b if cfg.uses_random_effects else np.zeros_like(pilot.b)
    return StartState(beta, b, pilot.sigma, pilot.D0)


def _e_step(dataset, cfg: SolverConfig, prep: Prepared, state: StartState):
    """Weights, random effects and variance components at the current state."""
    N = dataset.N
    if cfg.uses_weights:
        sigma = state.sigma
        if cfg.residual_scale == "mad":
            raw = standardized_residuals(dataset, state.beta, state.b, 1.0)
            sigma = max(MAD_CONSISTENCY * float(mad(raw)), SIGMA_FLOOR)
        r = standardized_residuals(dataset, state.beta, state.b, sigma)
        delta = discrepancy_factor(r) if cfg.pin_delta is None else cfg.pin_delta
        phi1, phi2 = cfg.weight_specs(dataset.p)
        ws = compute_weights(r, prep.leverage, delta, phi1, phi2)
    else:
        ws = WeightState.unit(N)
    w = ws.weights
    resid = dataset.Y - dataset.X @ state.beta
    if cfg.uses_random_effects:
        if cfg.vc_steps > 1:
            D_new, s2, B, V, _ = refine_variance_components(
                dataset, w, state.beta, state.D, state.sigma ** 2, tol=1e-10,
                max_iter=cfg.vc_steps, scale_aware=cfg.scale_aware_reb)
        else:
            s2_prev = state.sigma ** 2 if cfg.scale_aware_reb else 1.0
            B, V = reb_update_all(dataset, w, state.D, state.beta, resid=resid, sigma2=s2_prev)
            D_new = update_D(B, V)
            s2 = update_sigma2(dataset, state.beta, B, V, w)
    else:
        B = np.zeros((dataset.n, dataset.q))
        V = np.zeros((dataset.n, dataset.q, dataset.q))
        D_new = np.zeros((dataset.q, dataset.q))
        s2 = max(float(np.sum(w * resid * resid)) / N, 1e-8)
    return ws, B, V, D_new, s2


def _working_response(dataset, B) -> np.ndarray:
    return dataset.Y - np.einsum("ij,ij->i", dataset.Z, B[dataset.subject_index])


@dataclass(frozen=True, eq=False)
class _Design:
    """Row-transformed design handed to :func:`m_step`."""

    X: np.ndarray
    N: int

    @property
    def Xf(self) -> np.ndarray:
        return np.asfortranarray(self.X)

    @property
    def p(self) -> int:
        return self.X.shape[1]


def _mstep_problem(dataset, cfg: SolverConfig, ws, B, D, s2):
    """(design, response, weights) of the beta update at the current E-step."""
    if cfg.mstep == "profiled" and cfg.uses_random_effects:
        Xw, yw = profiled_whiten(dataset, ws.weights, D, [dataset.X, dataset.Y],
                                 sigma2=s2 if cfg.scale_aware_reb else 1.0)
        return _Design(Xw, dataset.N), yw, np.ones(dataset.N)
    ystar = _working_response(dataset, B) if cfg.uses_random_effects else dataset.Y
    return dataset, ystar, ws.weights


def full_objective(dataset, weights, D, beta, penalty: PenaltySpec, uses_random_effects=True,
                   sigma2: float = 1.0) -> float:
    """Profiled weighted loss plus N * penalty (random effects eliminated)."""
    w = weights.weights if isinstance(weights, WeightState) else np.asarray(weights, dtype=float)
    resid = dataset.Y - dataset.X @ np.asarray(beta, dtype=float)
    if uses_random_effects:
        loss = profiled_loss(dataset, w, D, resid, sigma2=sigma2)
    else:
        loss = float(np.sum(w * resid**2))
    return loss + dataset.N * penalty_total(penalty, beta)


def lambda_max(dataset, cfg: SolverConfig, prep: Optional[Prepared] = None) -> float:
    """Smallest lambda whose first M-step from beta = 0 returns zero."""
    prep = prep or prepare(dataset, cfg)
    ws, B, _, D, s2 = _e_step(dataset, cfg, prep, pilot_start(dataset, cfg, prep))
    design, ystar, w = _mstep_problem(dataset, cfg, ws, B, D, s2)
    score = np.abs(2.0 * design.X.T @ (w * ystar)) / dataset.N
    omega = cfg.effective_penalty().coord_weights(dataset.p) if cfg.penalty.family == "adaptive_lasso" \
        else np.ones(dataset.p)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(omega > 0, score / omega, 0.0)
    ratio[prep.pinned] = 0.0
    # headroom for the different summation order inside the CD kernel
    return float(ratio.max()) * (1.0 + 1e-10)


def fit(dataset, cfg: SolverConfig, *, prep: Optional[Prepared] = None,
        start: Optional[StartState] = None, beta_init=None, raise_on_nonconvergence: bool = True
        ) -> ModelFit:
    """Run the reweighted EM loop for one lambda.

    ``start`` supplies the state used by the first E-step (default: the
    robust pilot); ``beta_init`` the initial point of the first M-step
    (default: ``start.beta``).
    """
    prep = prep or prepare(dataset, cfg)
    state = start or pilot_start(dataset, cfg, prep)
    penalty = cfg.effective_penalty()
    beta_prev = np.array(state.beta if beta_init is None else beta_init, dtype=float)
    beta_prev[prep.pinned] = 0.0
    rel_hist, obj_hist, delta_hist, zero_hist = [], [], [], []
    converged = False
    k = 0
    for k in range(1, cfg.outer_max_iter + 1):
        ws, B, V, D_new, s2 = _e_step(dataset, cfg, prep, state)
        design, ystar, w = _mstep_problem(dataset, cfg, ws, B, D_new, s2)
        beta_new = m_step(design, ystar, w, penalty, beta_prev, cfg, pinned=prep.pinned)
        rel = float(np.linalg.norm(beta_new - beta_prev) / max(1.0, np.linalg.norm(beta_prev)))
        rel_hist.append(rel)
        obj_hist.append(full_objective(dataset, ws, D_new, beta_new, penalty, cfg.uses_random_effects,
                                       s2 if cfg.scale_aware_reb else 1.0))
        delta_hist.append(ws.delta)
        zero_hist.append(ws.n_zero)
        state = StartState(beta_new, B, float(np.sqrt(s2)), D_new)
        beta_prev = beta_new
        if rel <= cfg.outer_tol:
            converged = True
            break

    # random effects predicted at the returned beta
    if cfg.uses_random_effects:
        B_final, _ = reb_update_all(dataset, ws.weights, state.D, state.beta,
                                    sigma2=state.sigma ** 2 if cfg.scale_aware_reb else 1.0)
    else:
        B_final = np.zeros((dataset.n, dataset.q))
    result = ModelFit(
        beta=state.beta,
        b_hat=B_final,
        D_hat=state.D,
        sigma2_hat=float(state.sigma ** 2),
        weights=ws,
        trace=ConvergenceTrace(rel_hist, obj_hist, delta_hist, zero_hist),
        iterations=k,
        lam=float(penalty.lam),
        variant=cfg.variant,
        converged=converged,
        tau_sel=cfg.tau_sel,
        uses_random_effects=cfg.uses_random_effects,
    )
    if cfg.vc_refine_iter > 0:
        result = refine_fit(dataset, result, cfg.vc_refine_iter, cfg.scale_aware_reb)
    if not converged and raise_on_nonconvergence:
        raise NotConverged(result)
    return result


def refine_fit(dataset, fit_result: ModelFit, max_iter: int = 2000,
               scale_aware: bool = True) -> ModelFit:
    """Run the (D, sigma2) updates to their fixed point at the fitted beta and weights.

    One moment update per outer iteration leaves D far from its fixed point
    when beta converges quickly; this finishes the job.
    """
    if not fit_result.uses_random_effects:
        return fit_result
    w = fit_result.weights.weights
    D, s2, B, _, _ = refine_variance_components(dataset, w, fit_result.beta, fit_result.D_hat,
                                                fit_result.sigma2_hat, max_iter=max_iter,
                                                scale_aware=scale_aware)
    return replace(fit_result, b_hat=B, D_hat=D, sigma2_hat=s2)


def fit_state(fit_result: ModelFit) -> StartState:
    return StartState(fit_result.beta, fit_result.b_hat, float(np.sqrt(fit_result.sigma2_hat)),
                      fit_result.D_hat)


def lambda_grid(lam_max: float, n_lambda: int, ratio: float = 1e-3) -> np.ndarray:
    if n_lambda < 2:
        raise ValueError("n_lambda must be >= 2")
    return lam_max * np.geomspace(1.0, ratio, n_lambda)


def lambda_path(dataset, cfg: SolverConfig, n_lambda: int = 30, *, lambdas=None,
                prep: Optional[Prepared] = None):
    """Fits along a decreasing lambda grid with warm starts.

    The first fit starts its M-step from beta = 0; each later fit starts from
    the previous fit's full state. Entries that hit the outer iteration cap
    are kept (``fit.converged`` is False).
    """
    prep = prep or prepare(dataset, cfg)
    if lambdas is None:
        lam_top = lambda_max(dataset, cfg, prep)
        lambdas = lambda_grid(lam_top, n_lambda)
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.size < 2:
        raise ValueError("n_lambda must be >= 2")
    out = []
    start = pilot_start(dataset, cfg, prep)
    beta_init = np.zeros(dataset.p)
    for lam in lambdas:
        res = fit(dataset, cfg.with_lambda(lam), prep=prep, start=start, beta_init=beta_init,
                  raise_on_nonconvergence=False)
        if not res.converged:
            log.info("lambda=%.4g hit the outer iteration cap", lam)
        out.append((float(lam), res))
        start, beta_init = fit_state(res), None
    return out
