"""Residual and leverage outlyingness, the global discrepancy factor and the
doubly adaptive observation weights."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import chi2_quantile, half_normal_cdf

WEIGHT_FAMILIES = ("huber", "bisquare")


@dataclass(frozen=True)
class WeightFnSpec:
    family: str = "huber"
    cutoff: float = 1.345

    def __post_init__(self):
        if self.family not in WEIGHT_FAMILIES:
            raise ValueError(f"unknown weight family {self.family!r}")
        if not self.cutoff > 0:
            raise ValueError("cutoff must be positive")


@functools.lru_cache(maxsize=64)
def default_leverage_spec(p: int) -> WeightFnSpec:
    """Bisquare on d^2/p with cutoff chi2_{0.99}(p)/p."""
    return WeightFnSpec("bisquare", chi2_quantile(0.99, p) / p)


@dataclass(frozen=True, eq=False)
class WeightState:
    """Per-observation weights with the scores they were computed from.

    ``leverage`` holds the leverage score fed to the second weight function
    (the solver passes d^2/p).
    """

    weights: np.ndarray
    residuals: np.ndarray
    leverage: np.ndarray
    delta: float

    @property
    def n_zero(self) -> int:
        return int(np.count_nonzero(self.weights == 0.0))

    @classmethod
    def unit(cls, N: int) -> "WeightState":
        return cls(np.ones(N), np.zeros(N), np.zeros(N), 0.0)


def weight_fn(spec: WeightFnSpec, u):
    """phi(u) for u >= 0; non-increasing with phi(0) = 1."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValueError("weight functions take u >= 0")
    c = spec.cutoff
    if spec.family == "huber":
        with np.errstate(divide="ignore", over="ignore"):
            out = np.where(u > c, c / np.where(u > 0, u, 1.0), 1.0)
    else:
        out = np.where(u <= c, (1.0 - (u / c) ** 2) ** 2, 0.0)
    return out if out.ndim else float(out)


def standardized_residuals(dataset, beta, b, sigma: float) -> np.ndarray:
    """(Y - X beta - Z b_i) / sigma for every visit, in stacked order."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    b = np.asarray(b, dtype=float).reshape(dataset.n, dataset.q)
    fitted = dataset.X @ np.asarray(beta, dtype=float)
    fitted = fitted + np.einsum("ij,ij->i", dataset.Z, b[dataset.subject_index])
    return (dataset.Y - fitted) / sigma


def leverage_distances(dataset, scatter) -> np.ndarray:
    """Squared robust Mahalanobis distances of the fixed-effect rows."""
    return mahalanobis_sq(dataset.X, scatter)


def mahalanobis_sq(rows, scatter) -> np.ndarray:
    centered = np.asarray(rows, dtype=float) - scatter.location
    # inverse_factor F satisfies F.T @ F = scatter^-1
    proj = centered @ scatter.inverse_factor.T
    return np.einsum("ij,ij->i", proj, proj)


def discrepancy_factor(residuals, reference_cdf: Callable = half_normal_cdf) -> float:
    """Kolmogorov-Smirnov distance between the empirical CDF of |r| and the
    reference CDF of |Z| (half-normal by default)."""
    a = np.sort(np.abs(np.asarray(residuals, dtype=float).ravel()))
    n = a.size
    if n == 0:
        raise ValueError("need at least one residual")
    f0 = reference_cdf(a)
    i = np.arange(1, n + 1)
    d_plus = np.max(i / n - f0)
    d_minus = np.max(f0 - (i - 1) / n)
    return float(min(1.0, max(d_plus, d_minus, 0.0)))


def compute_weights(residuals, leverage, delta: float, spec1: WeightFnSpec,
                    spec2: WeightFnSpec) -> WeightState:
    """w = phi1(delta |r|) * phi2(delta * leverage)."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    residuals = np.asarray(residuals, dtype=float)
    leverage = np.asarray(leverage, dtype=float)
    if np.any(leverage < 0):
        raise ValueError("leverage scores must be >= 0")
    w = weight_fn(spec1, delta * np.abs(residuals)) * weight_fn(spec2, delta * leverage)
    w = np.clip(np.atleast_1d(w), 0.0, 1.0)
    return WeightState(w, residuals, leverage, float(delta))

