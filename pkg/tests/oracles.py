"""Independent reference computations used by the unit and acceptance tests.

None of these share code with the package beyond data containers; they are
slow, direct and meant to be obviously correct.
"""

import itertools
import math

import numpy as np
from scipy import special

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


# ---------------------------------------------------------------------------
# penalties and the scalar problem
# ---------------------------------------------------------------------------


def pen_value(t, lam, family, gamma):
    """Closed forms written out independently (vectorized over t)."""
    t = np.abs(np.asarray(t, dtype=float))
    if family == "lasso":
        return lam * t
    if family == "mcp":
        return np.where(t <= gamma * lam, lam * t - t * t / (2 * gamma), gamma * lam * lam / 2)
    a = gamma
    mid = (2 * a * lam * t - t * t - lam * lam) / (2 * (a - 1))
    return np.where(t <= lam, lam * t, np.where(t <= a * lam, mid, lam * lam * (a + 1) / 2))


def prox_oracle(z, u, lam, family, gamma, iters=80):
    """Minimize 0.5 z (b-u)^2 + pen(|b|) by golden-section search on each
    smooth piece between 0 and u, plus all piece endpoints.

    Vectorized over equal-length arrays ``z, u, lam``; returns (argmin, min).
    """
    z, u, lam = (np.asarray(v, dtype=float) for v in (z, u, lam))
    sgn = np.where(u >= 0, 1.0, -1.0)
    au = np.abs(u)

    def f(b):
        return 0.5 * z * (b - au) ** 2 + pen_value(b, lam, family, gamma)

    # the minimizer of the reflected problem lies in [0, |u|]
    inner = {"lasso": [], "mcp": [gamma * lam], "scad": [lam, gamma * lam]}[family]
    cuts = [np.zeros_like(au)] + [np.clip(k, 0.0, au) for k in inner] + [au]
    best_b = np.zeros_like(au)
    best_f = f(best_b)
    for c in cuts:
        fc = f(c)
        take = fc < best_f
        best_b, best_f = np.where(take, c, best_b), np.where(take, fc, best_f)
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        a, b = lo.copy(), np.maximum(hi, lo)
        x1 = b - GOLDEN * (b - a)
        x2 = a + GOLDEN * (b - a)
        f1, f2 = f(x1), f(x2)
        for _ in range(iters):
            left = f1 <= f2
            b = np.where(left, x2, b)
            a = np.where(left, a, x1)
            x2n = np.where(left, x1, a + GOLDEN * (b - a))
            x1n = np.where(left, b - GOLDEN * (b - a), x2)
            f1n = np.where(left, f(x1n), f2)
            f2n = np.where(left, f1, f(x2n))
            x1, x2, f1, f2 = x1n, x2n, f1n, f2n
        m = 0.5 * (a + b)
        fm = f(m)
        take = fm < best_f
        best_b, best_f = np.where(take, m, best_b), np.where(take, fm, best_f)
    return sgn * best_b, best_f


def prox_objective(b, z, u, lam, family, gamma):
    return 0.5 * z * (b - u) ** 2 + pen_value(b, lam, family, gamma)


# ---------------------------------------------------------------------------
# M-step grid oracle
# ---------------------------------------------------------------------------


def mstep_grid_min(X, y, w, lam, family, gamma, lo=-2.0, hi=2.0, m=41, chunk=200_000):
    """min over an m^p grid of sum w (y - X b)^2 + N * sum pen(|b_j|)."""
    N, p = X.shape
    axis = np.linspace(lo, hi, m)
    H = X.T @ (w[:, None] * X)
    g = X.T @ (w * y)
    c = float(np.sum(w * y * y))
    pen_axis = N * pen_value(axis, lam, family, gamma)
    best = np.inf
    best_pt = None
    total = m ** p
    for start in range(0, total, chunk):
        k = np.arange(start, min(total, start + chunk))
        idx = np.stack(np.unravel_index(k, (m,) * p), axis=1)
        B = axis[idx]
        val = c - 2 * B @ g + np.einsum("ij,jk,ik->i", B, H, B) + pen_axis[idx].sum(axis=1)
        j = int(np.argmin(val))
        if val[j] < best:
            best, best_pt = float(val[j]), B[j]
    return best, best_pt


def mstep_objective(X, y, w, beta, lam, family, gamma):
    r = y - X @ beta
    return float(np.sum(w * r * r) + X.shape[0] * np.sum(pen_value(beta, lam, family, gamma)))


# ---------------------------------------------------------------------------
# discrepancy factor
# ---------------------------------------------------------------------------


def ks_grid(residuals, m=20_001):
    """sup_u |F_n(u) - F0(u)| over a dense grid plus every order statistic and
    its neighbours 1e-13 away (F0 is 0.8-Lipschitz, so the offset is harmless)."""
    a = np.sort(np.abs(np.asarray(residuals, dtype=float)))
    top = max(8.0, a.max() + 1.0)
    grid = np.concatenate([np.linspace(0.0, top, m), a, np.maximum(a - 1e-13, 0.0), a + 1e-13])
    Fn = np.searchsorted(a, grid, side="right") / a.size
    F0 = special.erf(grid / math.sqrt(2.0))
    # left limits of Fn at the order statistics
    Fn_left = np.searchsorted(a, a, side="left") / a.size
    F0_a = special.erf(a / math.sqrt(2.0))
    return float(max(np.max(np.abs(Fn - F0)), np.max(np.abs(Fn_left - F0_a))))


# ---------------------------------------------------------------------------
# MCD
# ---------------------------------------------------------------------------


def mcd_bruteforce(rows, h):
    """Minimum covariance determinant over every h-subset; returns (det, subset)."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    best = (np.inf, None)
    for sub in itertools.combinations(range(rows.shape[0]), h):
        pts = rows[list(sub)]
        c = pts - pts.mean(axis=0)
        det = float(np.linalg.det(c.T @ c / h))
        if det < best[0]:
            best = (det, sub)
    return best


# ---------------------------------------------------------------------------
# mixed-model algebra
# ---------------------------------------------------------------------------


def profile_min(e, Z, w, D):
    """min_b ||W^1/2 (e - Z b)||^2 + b' D^-1 b via a stacked least-squares problem."""
    sw = np.sqrt(w)
    vals, vecs = np.linalg.eigh(D)
    Dm_half = vecs @ np.diag(vals ** -0.5) @ vecs.T
    A = np.vstack([sw[:, None] * Z, Dm_half])
    rhs = np.concatenate([sw * e, np.zeros(Z.shape[1])])
    b, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    r = rhs - A @ b
    return float(r @ r), b


def random_spd(rng, q, lo=0.2):
    M = rng.standard_normal((q, q))
    return M @ M.T + lo * np.eye(q)
