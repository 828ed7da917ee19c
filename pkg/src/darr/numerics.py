"""Shared numerical kernels: seeded RNG streams, distribution functions,
SPD factorizations and deterministic summation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats
from scipy.linalg import lapack

RNG_ALGORITHM = "philox4x64"


class NotPositiveDefinite(np.linalg.LinAlgError):
    def __init__(self, pivot: int):
        super().__init__(f"matrix is not positive definite (pivot {pivot})")
        self.pivot = pivot


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, stream)``.

    Philox is counter based, so the sequence depends only on the key derived
    from the pair and is identical across platforms and thread counts.
    """
    if seed < 0 or stream < 0:
        raise ValueError("seed and stream must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))


def normal_cdf(x):
    return special.ndtr(x)


def half_normal_cdf(u):
    """P(|Z| <= u) for standard normal Z; zero for u <= 0."""
    u = np.asarray(u, dtype=float)
    return np.where(u > 0, special.erf(np.maximum(u, 0.0) / np.sqrt(2.0)), 0.0)


def chi2_quantile(prob: float, dof: float) -> float:
    if not 0.0 < prob < 1.0:
        raise ValueError(f"prob must lie in (0, 1), got {prob}")
    if dof < 1:
        raise ValueError(f"dof must be >= 1, got {dof}")
    return float(stats.chi2.ppf(prob, dof))


@dataclass(frozen=True)
class SpdFactor:
    """Lower Cholesky factor ``L`` with ``L @ L.T == A``."""

    lower: np.ndarray

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    def inverse(self) -> np.ndarray:
        inv, info = lapack.dpotri(self.lower, lower=1)
        if info != 0:
            raise NotPositiveDefinite(info - 1)
        inv = np.tril(inv)
        return inv + np.tril(inv, -1).T

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))


def spd_factor(a, sym_tol: float = 1e-10) -> SpdFactor:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("spd_factor needs a square matrix")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > sym_tol * scale:
        raise ValueError("matrix is not symmetric")
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefinite(info - 1)
    if info < 0:
        raise ValueError(f"dpotrf argument {-info} invalid")
    return SpdFactor(c)


def spd_solve(factor: SpdFactor, rhs) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=float)
    x, info = lapack.dpotrs(factor.lower, rhs, lower=1)
    if info != 0:
        raise ValueError(f"dpotrs argument {-info} invalid")
    return x


def pairwise_sum(values) -> float:
    # numpy's reduction over a contiguous float64 buffer is pairwise and
    # independent of thread count
    return float(np.add.reduce(np.ascontiguousarray(values, dtype=np.float64).ravel()))


def floor_eigenvalues(a: np.ndarray, floor: float) -> np.ndarray:
    """Symmetrize ``a`` and raise its eigenvalues to at least ``floor``."""
    a = 0.5 * (a + a.T)
    vals, vecs = np.linalg.eigh(a)
    if vals.min() >= floor:
        return a
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T
