"""Robust pilot fit and robust location/scatter of the fixed-effect covariates."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .mixed_effects import SingularSystem
from .numerics import rng_stream

log = logging.getLogger(__name__)

MAD_CONSISTENCY = 1.4826
SIGMA_FLOOR = 1e-6


class DegenerateScatter(ValueError):
    pass


class InfeasibleSubset(ValueError):
    pass


@dataclass(frozen=True)
class PilotConfig:
    huber_c: float = 1.345
    ridge: float = 1e-3
    max_iter: int = 50
    tol: float = 1e-8


@dataclass(frozen=True)
class ScatterConfig:
    mode: str = "diagonal"  # "diagonal" | "mcd"
    h_fraction: float = 0.75
    n_starts: int = 20
    seed: int = 0
    floor: bool = True

    def __post_init__(self):
        if self.mode not in ("diagonal", "mcd"):
            raise ValueError(f"unknown scatter mode {self.mode!r}")


@dataclass(frozen=True, eq=False)
class PilotEstimates:
    beta: np.ndarray
    b: np.ndarray  # (n, q)
    sigma: float
    D0: np.ndarray


@dataclass(frozen=True, eq=False)
class RobustScatter:
    """Robust center and scatter; ``inverse_factor`` is the lower-triangular
    ``L^-1`` of the Cholesky factor, so ``inverse_factor.T @ inverse_factor == inv(scatter)``."""

    location: np.ndarray
    scatter: np.ndarray
    mode: str
    inverse_factor: np.ndarray


def mad(x, axis=None):
    x = np.asarray(x, dtype=float)
    med = np.median(x, axis=axis, keepdims=True)
    return np.median(np.abs(x - med), axis=axis)


def _segment_median(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return np.stack([np.median(values[a:b], axis=0) for a, b in zip(offsets[:-1], offsets[1:])])


def pilot_fit(dataset, config: PilotConfig = PilotConfig()) -> PilotEstimates:
    """Huber IRLS on subject-centered data, then per-subject ridge random effects.

    The fixed-effect pilot solves ridge-stabilized weighted normal equations with
    Huber weights, using the MAD of the current residuals as scale.
    """
    X, Y, Z = dataset.X, dataset.Y, dataset.Z
    idx = dataset.subject_index
    Yc = Y - _segment_median(Y, dataset.offsets)[idx]
    Xc = X - _segment_median(X, dataset.offsets)[idx]
    p = dataset.p
    ridge = config.ridge * float(np.mean(np.einsum("ij,ij->j", Xc, Xc)))
    w = np.ones(dataset.N)
    beta = np.zeros(p)
    for _ in range(config.max_iter):
        Xw = Xc * w[:, None]
        G = Xc.T @ Xw + ridge * np.eye(p)
        try:
            beta_new = cho_solve(cho_factor(G, lower=True), Xw.T @ Yc)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem("pilot normal equations are singular") from exc
        r = Yc - Xc @ beta_new
        scale = MAD_CONSISTENCY * float(np.median(np.abs(r - np.median(r))))
        if scale <= SIGMA_FLOOR:
            w = np.ones_like(r)
        else:
            u = np.abs(r) / (config.huber_c * scale)
            w = np.where(u > 1.0, 1.0 / np.maximum(u, 1.0), 1.0)
        done = np.max(np.abs(beta_new - beta)) <= config.tol * max(1.0, np.max(np.abs(beta_new)))
        beta = beta_new
        if done:
            break

    e = Y - X @ beta
    q = dataset.q
    b = np.zeros((dataset.n, q))
    for i, (lo, hi) in enumerate(zip(dataset.offsets[:-1], dataset.offsets[1:])):
        Zi = Z[lo:hi]
        b[i] = np.linalg.solve(Zi.T @ Zi + np.eye(q), Zi.T @ e[lo:hi])
    resid = e - np.einsum("ij,ij->i", Z, b[idx])
    sigma = max(MAD_CONSISTENCY * float(np.median(np.abs(resid - np.median(resid)))), SIGMA_FLOOR)
    return PilotEstimates(beta, b, sigma, np.eye(q))


def robust_location_scatter(rows, config: ScatterConfig = ScatterConfig()) -> RobustScatter:
    rows = np.asarray(rows, dtype=float)
    N, p = rows.shape
    if N < 2:
        raise ValueError("need at least two rows")
    span = rows.max(axis=0) - rows.min(axis=0)
    floor = 1e-6 * (span + 1.0)
    if config.mode == "mcd" and N >= 2 * (p + 1):
        h = int(np.floor(config.h_fraction * N))
        location, scatter = fast_mcd(rows, h, config.n_starts, config.seed)
        # regularize to PD with the per-coordinate floor on the diagonal
        scatter = 0.5 * (scatter + scatter.T) + np.diag(floor ** 2)
        mode = "mcd"
    else:
        if config.mode == "mcd":
            log.info("MCD infeasible for N=%d, p=%d; using diagonal scatter", N, p)
        location = np.median(rows, axis=0)
        s = MAD_CONSISTENCY * mad(rows, axis=0)
        if not config.floor and np.any(s == 0):
            raise DegenerateScatter(f"zero MAD in coordinates {np.flatnonzero(s == 0).tolist()}")
        s = np.maximum(s, floor) if config.floor else s
        scatter = np.diag(s ** 2)
        mode = "diagonal"
    # scatter = L L'  =>  scatter^-1 = (L^-1)' (L^-1)
    L = np.linalg.cholesky(scatter)
    Linv = solve_triangular(L, np.eye(p), lower=True)
    return RobustScatter(location, scatter, mode, Linv)


def _mean_cov(sub: np.ndarray):
    m = sub.mean(axis=0)
    c = sub - m
    return m, c.T @ c / sub.shape[0]


def _subset_det(rows, subset) -> float:
    return float(np.linalg.det(_mean_cov(rows[subset])[1]))


def _distances(rows, m, S, rel_tol=1e-12) -> np.ndarray:
    vals, vecs = np.linalg.eigh(S)
    proj = (rows - m) @ vecs
    big = vals > rel_tol * max(vals.max(), 0.0) if vals.max() > 0 else np.zeros_like(vals, dtype=bool)
    d = np.sum(proj[:, big] ** 2 / vals[big], axis=1)
    # points off a degenerate subspace are infinitely far
    off = np.any(np.abs(proj[:, ~big]) > 1e-9 * (1.0 + np.abs(rows).max()), axis=1)
    d[off] = np.inf
    return d


def _c_steps(rows, subset, h, max_steps=None):
    """Run C-steps; returns (subset, det, dets-per-step)."""
    det = _subset_det(rows, subset)
    history = [det]
    steps = 0
    while max_steps is None or steps < max_steps:
        m, S = _mean_cov(rows[subset])
        if det <= 0.0:
            break
        d = _distances(rows, m, S)
        new = np.sort(np.argsort(d, kind="stable")[:h])
        new_det = _subset_det(rows, new)
        steps += 1
        if new_det > det * (1 + 1e-12) + 1e-300:
            raise AssertionError("C-step increased the determinant")
        if np.array_equal(new, subset) or new_det >= det:
            break
        subset, det = new, new_det
        history.append(det)
    return subset, det, history


def _start_subset(rows, base, h):
    m, S = _mean_cov(rows[base])
    d = _distances(rows, m, S)
    return np.sort(np.argsort(d, kind="stable")[:h])


def _consistency_factor(h: int, N: int, p: int) -> float:
    if h >= N:
        return 1.0
    alpha = h / N
    return alpha / stats.chi2.cdf(stats.chi2.ppf(alpha, p), p + 2)


def fast_mcd(rows, h: int, n_starts: Optional[int] = 20, seed: int = 0, *,
             exhaustive: bool = False, return_subset: bool = False):
    """FastMCD: random (p+1)-subset starts, two C-steps each, the best five
    carried to convergence. ``exhaustive=True`` uses every (p+1)-subset as a
    start and runs all of them to convergence.
    """
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    N, p = rows.shape
    if h < p + 1:
        raise InfeasibleSubset(f"h={h} < p+1={p + 1}")
    if h > N:
        raise InfeasibleSubset(f"h={h} > N={N}")
    if h == N:
        subset = np.arange(N)
    else:
        if exhaustive:
            bases = [np.array(c) for c in itertools.combinations(range(N), p + 1)]
            carry = len(bases)
            pre_steps = None
        else:
            rng = rng_stream(seed)
            bases = [rng.choice(N, size=p + 1, replace=False) for _ in range(n_starts)]
            carry = min(5, len(bases))
            pre_steps = 2
        candidates = []
        for k, base in enumerate(bases):
            sub, det, _ = _c_steps(rows, _start_subset(rows, base, h), h, pre_steps)
            candidates.append((det, k, sub))
        candidates.sort(key=lambda c: (c[0], c[1]))
        finals = []
        for det, k, sub in candidates[:carry]:
            sub, det, _ = _c_steps(rows, sub, h)
            finals.append((det, k, sub))
        finals.sort(key=lambda c: (c[0], c[1]))
        subset = finals[0][2]
    location, S = _mean_cov(rows[subset])
    scatter = S * _consistency_factor(h, N, p)
    if return_subset:
        return location, scatter, subset
    return location, scatter
