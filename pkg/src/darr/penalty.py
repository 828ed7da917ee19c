"""Penalty families, their LLA derivatives and exact scalar thresholding rules.

The scalar problem solved by :func:`scalar_prox` is::

    minimize_b  0.5 * z * (b - u)**2 + pen(|b|; level, gamma)

where ``level`` plays the role of lambda in the penalty. In the M-step the
per-coordinate objective is divided by N, so ``z = 2 a_j / N`` and
``level = lambda``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

FAMILIES = ("lasso", "mcp", "scad", "adaptive_lasso")
LASSO, MCP, SCAD, ADAPTIVE_LASSO = 0, 1, 2, 3
_CODES = {name: k for k, name in enumerate(FAMILIES)}


class NonconvexScalar(ArithmeticError):
    """The scalar subproblem has no convex piecewise solution (z too small for gamma)."""


@dataclass(frozen=True)
class PenaltySpec:
    family: str = "scad"
    lam: float = 0.0
    gamma: Optional[float] = None
    adaptive_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.family not in _CODES:
            raise ValueError(f"unknown penalty family {self.family!r}")
        if self.gamma is None:
            object.__setattr__(self, "gamma", default_gamma(self.family))
        object.__setattr__(self, "gamma", float(self.gamma))
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if self.family == "mcp" and not self.gamma > 1:
            raise ValueError("MCP needs gamma > 1")
        if self.family == "scad" and not self.gamma > 2:
            raise ValueError("SCAD needs a > 2")
        if self.adaptive_weights is not None:
            w = np.asarray(self.adaptive_weights, dtype=float)
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("adaptive weights must be finite and >= 0")
            object.__setattr__(self, "adaptive_weights", w)

    @property
    def code(self) -> int:
        return _CODES[self.family]

    def with_lambda(self, lam: float) -> "PenaltySpec":
        return PenaltySpec(self.family, float(lam), self.gamma, self.adaptive_weights)

    def coord_weights(self, p: int) -> np.ndarray:
        if self.family == "adaptive_lasso" and self.adaptive_weights is not None:
            if self.adaptive_weights.shape != (p,):
                raise ValueError(f"adaptive weights need length {p}")
            return self.adaptive_weights
        return np.ones(p)


def default_gamma(family: str) -> float:
    return {"mcp": 3.0, "scad": 3.7}.get(family, 3.7)


def adaptive_weights_from(beta_pilot, eps: float = 1e-6) -> np.ndarray:
    return 1.0 / (np.abs(np.asarray(beta_pilot, dtype=float)) + eps)


@numba.njit(cache=True)
def _value(t, lam, family, gamma):
    if family == MCP:
        if t <= gamma * lam:
            return lam * t - t * t / (2.0 * gamma)
        return 0.5 * gamma * lam * lam
    if family == SCAD:
        a = gamma
        if t <= lam:
            return lam * t
        if t <= a * lam:
            return (2.0 * a * lam * t - t * t - lam * lam) / (2.0 * (a - 1.0))
        return 0.5 * lam * lam * (a + 1.0)
    return lam * t


@numba.njit(cache=True)
def _derivative(t, lam, family, gamma):
    if family == MCP:
        return max(lam - t / gamma, 0.0)
    if family == SCAD:
        if t <= lam:
            return lam
        return max(gamma * lam - t, 0.0) / (gamma - 1.0)
    return lam


@numba.njit(cache=True)
def _soft(s, thresh, z):
    if s > thresh:
        return (s - thresh) / z
    if s < -thresh:
        return (s + thresh) / z
    return 0.0


@numba.njit(cache=True)
def _prox(z, u, lam, family, gamma):
    """Return (minimizer, ok); ok is False when the piecewise rule does not apply."""
    s = z * u
    abs_s = abs(s)
    sign = 1.0 if s >= 0 else -1.0
    if family == MCP:
        if z <= 1.0 / gamma:
            return 0.0, False
        if abs_s <= lam:
            return 0.0, True
        if abs_s <= gamma * lam * z:
            return sign * (abs_s - lam) / (z - 1.0 / gamma), True
        return s / z, True
    if family == SCAD:
        a = gamma
        if z <= 1.0 / (a - 1.0):
            return 0.0, False
        if abs_s <= lam * (z + 1.0):
            return _soft(s, lam, z), True
        if abs_s <= a * lam * z:
            return sign * (abs_s - a * lam / (a - 1.0)) / (z - 1.0 / (a - 1.0)), True
        return s / z, True
    return _soft(s, lam, z), True


def _level(spec: PenaltySpec, weight: float) -> float:
    return spec.lam * weight if spec.code == ADAPTIVE_LASSO else spec.lam


def penalty_value(spec: PenaltySpec, t, weight: float = 1.0) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    return _value(float(t), _level(spec, weight), spec.code, spec.gamma)


def penalty_derivative(spec: PenaltySpec, t, weight: float = 1.0) -> float:
    """Right derivative of the penalty at ``t >= 0`` (the LLA weight)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return _derivative(float(t), _level(spec, weight), spec.code, spec.gamma)


@numba.njit(cache=True)
def _total(abs_beta, lam, family, gamma):
    out = 0.0
    for j in range(abs_beta.shape[0]):
        out += _value(abs_beta[j], lam[j], family, gamma)
    return out


def penalty_total(spec: PenaltySpec, beta) -> float:
    beta = np.abs(np.asarray(beta, dtype=float))
    lam = spec.lam * spec.coord_weights(beta.size)
    return float(_total(beta, lam, spec.code, spec.gamma))


def scalar_prox(z: float, u: float, level: float, spec: PenaltySpec, weight: float = 1.0) -> float:
    """Exact minimizer of ``0.5*z*(b-u)**2 + pen(|b|)`` with the penalty's
    lambda replaced by ``level`` (times ``weight`` for adaptive lasso).

    Raises :class:`NonconvexScalar` for MCP when ``z <= 1/gamma`` and for
    SCAD when ``z <= 1/(a-1)``.
    """
    if not z > 0:
        raise ValueError("z must be positive")
    lam = level * weight if spec.code == ADAPTIVE_LASSO else level
    val, ok = _prox(float(z), float(u), float(lam), spec.code, spec.gamma)
    if not ok:
        raise NonconvexScalar(
            f"{spec.family} scalar problem is nonconvex: z={z:g} vs gamma={spec.gamma:g}"
        )
    return val
