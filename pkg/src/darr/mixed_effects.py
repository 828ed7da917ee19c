"""Weighted empirical-Bayes random effects, moment updates of the variance
components and the profiled effective weight matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .data import D_FLOOR
from .numerics import NotPositiveDefinite, floor_eigenvalues, spd_factor, spd_solve

SIGMA2_FLOOR = 1e-8


class SingularSystem(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class SubjectPosterior:
    b_hat: np.ndarray
    V: np.ndarray


def working_cov(D, floor: float = D_FLOOR) -> np.ndarray:
    """Symmetrized D with eigenvalues floored, safe to invert."""
    return floor_eigenvalues(np.atleast_2d(np.asarray(D, dtype=float)), floor)


def _inv_spd(a) -> np.ndarray:
    try:
        return spd_factor(a).inverse()
    except NotPositiveDefinite as exc:
        raise SingularSystem(str(exc)) from exc


def reb_update(block, w, D, beta, floor: float = D_FLOOR) -> SubjectPosterior:
    """Posterior mode and covariance of one subject's random effect.

    b = (Z' W Z + D^-1)^-1 Z' W (Y - X beta), V = (Z' W Z + D^-1)^-1.
    Pass ``floor=0`` to skip the eigenvalue floor on D.
    """
    w = np.asarray(w, dtype=float)
    D = working_cov(D, floor) if floor > 0 else np.asarray(D, dtype=float)
    Dinv = _inv_spd(D)
    Zw = block.Z * w[:, None]
    A = block.Z.T @ Zw + Dinv
    e = block.Y - block.X @ np.asarray(beta, dtype=float)
    try:
        factor = spd_factor(0.5 * (A + A.T))
    except NotPositiveDefinite as exc:
        raise SingularSystem(str(exc)) from exc
    b = spd_solve(factor, Zw.T @ e)
    return SubjectPosterior(b, factor.inverse())


def _segment_sum(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return np.add.reduceat(values, offsets[:-1], axis=0)


def reb_update_all(dataset, w, D, beta, floor: float = D_FLOOR, resid=None, sigma2: float = 1.0):
    """Vectorized :func:`reb_update` over all subjects.

    Returns ``(B, V)`` with shapes ``(n, q)`` and ``(n, q, q)``. ``resid``
    optionally supplies ``Y - X beta`` to avoid recomputation. With
    ``sigma2 != 1`` the error variance enters as in the Gaussian posterior:
    ``B = (Z'WZ + sigma2 D^-1)^-1 Z'W e`` and ``V = sigma2 (Z'WZ + sigma2 D^-1)^-1``.
    """
    w = np.asarray(w, dtype=float)
    Dinv = _inv_spd(working_cov(D, floor))
    Z = dataset.Z
    if resid is None:
        resid = dataset.Y - dataset.X @ np.asarray(beta, dtype=float)
    Zw = Z * w[:, None]
    A = _segment_sum(Zw[:, :, None] * Z[:, None, :], dataset.offsets) + sigma2 * Dinv
    rhs = _segment_sum(Zw * resid[:, None], dataset.offsets)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    eye = np.broadcast_to(np.eye(dataset.q), A.shape)
    Linv = np.linalg.solve(L, eye)
    Ainv = np.swapaxes(Linv, 1, 2) @ Linv
    B = np.einsum("ijk,ik->ij", Ainv, rhs)
    return B, sigma2 * Ainv


def update_D(B, V, floor: float = D_FLOOR) -> np.ndarray:
    """(1/n) sum_i (b_i b_i' + V_i), then the eigenvalue floor."""
    B = np.asarray(B, dtype=float)
    V = np.asarray(V, dtype=float)
    n = B.shape[0]
    if n < 1:
        raise ValueError("need at least one subject")
    S = (B[:, :, None] * B[:, None, :] + V).sum(axis=0) / n
    S = 0.5 * (S + S.T)
    return floor_eigenvalues(S, floor) if floor > 0 else S


def update_sigma2(dataset, beta, B, V, w, floor: float = SIGMA2_FLOOR) -> float:
    """(1/N) sum_i { ||W_i^1/2 e_i||^2 + tr(W_i Z_i V_i Z_i') }, e_i = Y_i - X_i beta - Z_i b_i."""
    w = np.asarray(w, dtype=float)
    B = np.asarray(B, dtype=float)
    idx = dataset.subject_index
    Z = dataset.Z
    e = dataset.Y - dataset.X @ np.asarray(beta, dtype=float) - np.einsum("ij,ij->i", Z, B[idx])
    quad = np.einsum("ij,ijk,ik->i", Z, np.asarray(V, dtype=float)[idx], Z)
    s2 = float(np.sum(w * (e * e + quad))) / dataset.N
    return max(s2, floor)


def effective_weights(block, w, D, floor: float = D_FLOOR) -> np.ndarray:
    """W~ = W - W Z (Z' W Z + D^-1)^-1 Z' W for one subject."""
    w = np.asarray(w, dtype=float)
    Dinv = _inv_spd(working_cov(D, floor))
    Zw = block.Z * w[:, None]
    A = block.Z.T @ Zw + Dinv
    Wt = np.diag(w) - Zw @ _inv_spd(0.5 * (A + A.T)) @ Zw.T
    return 0.5 * (Wt + Wt.T)


def profiled_loss(dataset, w, D, resid, floor: float = D_FLOOR, sigma2: float = 1.0) -> float:
    """sum_i e_i' W~_i e_i for ``resid = Y - X beta``, without forming W~
    (D taken in units of ``sigma2``)."""
    w = np.asarray(w, dtype=float)
    Dinv = _inv_spd(working_cov(D, floor))
    Z = dataset.Z
    Zw = Z * w[:, None]
    A = _segment_sum(Zw[:, :, None] * Z[:, None, :], dataset.offsets) + sigma2 * Dinv
    rhs = _segment_sum(Zw * resid[:, None], dataset.offsets)
    sol = np.linalg.solve(A, rhs[:, :, None])[:, :, 0]
    return float(np.sum(w * resid * resid) - np.sum(rhs * sol))


def profiled_whiten(dataset, w, D, arrays, floor: float = D_FLOOR, sigma2: float = 1.0):
    """Row arrays premultiplied, subject by subject, by a square root of W~_i.

    With ``L_i = (I - P_i)^1/2 W_i^1/2`` and ``P_i = W_i^1/2 Z_i A_i^-1 Z_i' W_i^1/2``
    (``A_i = Z_i' W_i Z_i + sigma2 D^-1``), ``L_i' L_i = W~_i``, so for
    whitened ``y`` and ``X`` the plain sum of squares ``||y - X beta||^2``
    equals :func:`profiled_loss` at ``resid = Y - X beta``.
    """
    w = np.asarray(w, dtype=float)
    Dinv = _inv_spd(working_cov(D, floor))
    sizes = dataset.sizes
    starts = dataset.offsets[:-1]
    out = [np.empty_like(np.asarray(a, dtype=float)) for a in arrays]
    for T in np.unique(sizes):
        rows = (starts[sizes == T][:, None] + np.arange(T)).ravel()
        m = rows.size // T
        sw = np.sqrt(w[rows]).reshape(m, T)
        Zs = dataset.Z[rows].reshape(m, T, -1) * sw[:, :, None]
        A = np.swapaxes(Zs, 1, 2) @ Zs + sigma2 * Dinv
        P = Zs @ np.linalg.solve(A, np.swapaxes(Zs, 1, 2))
        vals, vecs = np.linalg.eigh(np.eye(T) - 0.5 * (P + np.swapaxes(P, 1, 2)))
        root = (vecs * np.sqrt(np.clip(vals, 0.0, 1.0))[:, None, :]) @ np.swapaxes(vecs, 1, 2)
        L = root * sw[:, None, :]
        for src, dst in zip(arrays, out):
            blk = np.asarray(src, dtype=float)[rows].reshape(m, T, -1)
            dst[rows] = (L @ blk).reshape(dst[rows].shape)
    return out


@numba.njit(cache=True)
def _floor_sym(S, floor):
    S = 0.5 * (S + S.T)
    if floor <= 0.0:
        return S
    vals, vecs = np.linalg.eigh(S)
    if vals.min() >= floor:
        return S
    return (vecs * np.maximum(vals, floor)) @ vecs.T


@numba.njit(cache=True)
def _small_spd_inv(A, out, work):
    """Inverse of a small SPD matrix via an unpivoted Cholesky factor (in ``work``)."""
    q = A.shape[0]
    for j in range(q):
        d = A[j, j]
        for k in range(j):
            d -= work[j, k] * work[j, k]
        d = np.sqrt(d)
        work[j, j] = d
        for i in range(j + 1, q):
            v = A[i, j]
            for k in range(j):
                v -= work[i, k] * work[j, k]
            work[i, j] = v / d
    # columns of L^-T L^-1 by forward then back substitution
    for c in range(q):
        for i in range(q):
            v = 1.0 if i == c else 0.0
            for k in range(i):
                v -= work[i, k] * out[k, c]
            out[i, c] = v / work[i, i]
        for i in range(q - 1, -1, -1):
            v = out[i, c]
            for k in range(i + 1, q):
                v -= work[k, i] * out[k, c]
            out[i, c] = v / work[i, i]
    for i in range(q):
        for j in range(i):
            m = 0.5 * (out[i, j] + out[j, i])
            out[i, j] = m
            out[j, i] = m


@numba.njit(cache=True)
def _vc_fixed_point(G, h, rwr, N, D, s2, floor, tol, max_iter, scale_aware, s2_floor):
    n, q = h.shape
    Dinv = np.empty((q, q))
    Ai = np.empty((q, q))
    M = np.empty((q, q))
    work = np.zeros((q, q))
    b = np.empty(q)
    k = 0
    for k in range(1, max_iter + 1):
        scale = s2 if scale_aware else 1.0
        _small_spd_inv(D, Dinv, work)
        S = np.zeros((q, q))
        quad = rwr
        trace = 0.0
        for i in range(n):
            for r in range(q):
                for c in range(q):
                    M[r, c] = G[i, r, c] + scale * Dinv[r, c]
            _small_spd_inv(M, Ai, work)
            for r in range(q):
                v = 0.0
                for c in range(q):
                    v += Ai[r, c] * h[i, c]
                b[r] = v
            for r in range(q):
                quad -= 2.0 * b[r] * h[i, r]
                for c in range(q):
                    S[r, c] += b[r] * b[c] + scale * Ai[r, c]
                    quad += b[r] * G[i, r, c] * b[c]
                    trace += scale * G[i, r, c] * Ai[r, c]
        D_new = _floor_sym(S / n, floor)
        s2_new = max((quad + trace) / N, s2_floor)
        done = (np.max(np.abs(D_new - D)) <= tol * max(1.0, np.max(np.abs(D)))
                and abs(s2_new - s2) <= tol * max(1.0, s2))
        D, s2 = D_new, s2_new
        if done:
            break
    return D, s2, k


def refine_variance_components(dataset, w, beta, D0, sigma2_0: float = 1.0,
                               floor: float = D_FLOOR, tol: float = 1e-8,
                               max_iter: int = 2000, scale_aware: bool = True):
    """Iterate the REB step and the (D, sigma2) moment updates to a fixed
    point with beta and the weights held fixed.

    Works on per-subject sufficient statistics, so each iteration costs
    O(n q^3). Returns ``(D, sigma2, B, V, iterations)``.
    """
    w = np.asarray(w, dtype=float)
    Z = dataset.Z
    N = dataset.N
    resid = dataset.Y - dataset.X @ np.asarray(beta, dtype=float)
    Zw = Z * w[:, None]
    G = _segment_sum(Zw[:, :, None] * Z[:, None, :], dataset.offsets)
    h = _segment_sum(Zw * resid[:, None], dataset.offsets)
    rwr = float(np.sum(w * resid * resid))
    D, s2, k = _vc_fixed_point(G, h, rwr, N, working_cov(D0, floor), max(float(sigma2_0), SIGMA2_FLOOR),
                               floor, tol, max_iter, scale_aware, SIGMA2_FLOOR)
    B, V = reb_update_all(dataset, w, D, beta, floor, resid=resid,
                          sigma2=s2 if scale_aware else 1.0)
    return D, s2, B, V, k
