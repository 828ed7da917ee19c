"""Simulated longitudinal data with AR(1) covariates, random intercepts and
slopes, and the three contamination scenarios used by the benchmark."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .data import LongitudinalDataset, SubjectBlock
from .numerics import rng_stream

ACTIVE_VALUES = (2.0, -1.5, 1.0, -2.5, 1.8, 2.2, -1.2, 1.5, -2.0, 1.0)
SCENARIOS = ("S1", "S2", "S3")

# independent streams under one seed
_STREAM_TRAIN, _STREAM_CONTAM, _STREAM_TEST = 0, 1, 2


def default_beta_star(p: int = 200, s: int = 10) -> np.ndarray:
    beta = np.zeros(p)
    vals = np.resize(np.asarray(ACTIVE_VALUES), s)
    beta[:s] = vals
    return beta


@dataclass(frozen=True, eq=False)
class DgpConfig:
    n: int = 100
    T: int = 5
    p: int = 200
    s: int = 10
    beta_star: Optional[np.ndarray] = None
    rho: float = 0.5
    D_star: np.ndarray = field(default_factory=lambda: np.diag([1.0, 0.25]))
    sigma_eps: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.beta_star is None:
            object.__setattr__(self, "beta_star", default_beta_star(self.p, self.s))
        beta = np.asarray(self.beta_star, dtype=float)
        if beta.shape != (self.p,):
            raise ValueError(f"beta_star must have length p={self.p}")
        object.__setattr__(self, "beta_star", beta)
        object.__setattr__(self, "D_star", np.asarray(self.D_star, dtype=float))
        if not 0 <= self.s <= self.p:
            raise ValueError("need 0 <= s <= p")
        if not abs(self.rho) < 1:
            raise ValueError("need |rho| < 1")
        if self.n < 1 or self.T < 1:
            raise ValueError("need n, T >= 1")
        if self.sigma_eps < 0:
            raise ValueError("sigma_eps must be >= 0")


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "S1"
    pi: float = 0.1

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.scenario == "S1":
            object.__setattr__(self, "pi", 0.0)
        if not 0.0 <= self.pi < 0.5:
            raise ValueError("pi must lie in [0, 0.5)")
        if self.scenario != "S1" and self.pi == 0.0:
            raise ValueError(f"{self.scenario} needs pi > 0")


@dataclass(frozen=True, eq=False)
class SimTruth:
    beta_star: np.ndarray
    D_star: np.ndarray
    sigma_eps: float
    b: np.ndarray  # (n, q) realized random effects
    eps: np.ndarray  # stacked errors actually used in Y
    contaminated: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    contaminated_level: str = "none"  # "observation" | "subject" | "none"

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.beta_star != 0)

    @property
    def s(self) -> int:
        return int(self.support.size)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def ar1_rows(rng, N: int, p: int, rho: float) -> np.ndarray:
    """Rows with covariance rho^|j-k| via x_1 = e_1, x_j = rho x_{j-1} + sqrt(1-rho^2) e_j."""
    eta = rng.standard_normal((N, p))
    X = np.empty((N, p))
    X[:, 0] = eta[:, 0]
    c = math.sqrt(1.0 - rho * rho)
    for j in range(1, p):
        X[:, j] = rho * X[:, j - 1] + c * eta[:, j]
    return X


def _random_effects(rng, n: int, D: np.ndarray) -> np.ndarray:
    q = D.shape[0]
    vals, vecs = np.linalg.eigh(0.5 * (D + D.T))
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    return rng.standard_normal((n, q)) @ root.T


def _design_Z(T: int) -> np.ndarray:
    t = np.arange(1, T + 1, dtype=float)
    return np.column_stack([np.ones(T), t / T])


def _assemble(cfg: DgpConfig, rng, id_offset: int = 0):
    n, T, p = cfg.n, cfg.T, cfg.p
    N = n * T
    X = ar1_rows(rng, N, p, cfg.rho)
    b = _random_effects(rng, n, cfg.D_star)
    eps = cfg.sigma_eps * rng.standard_normal(N)
    Zi = _design_Z(T)
    Z = np.tile(Zi, (n, 1))
    Zb = np.einsum("ij,ij->i", Z, np.repeat(b, T, axis=0))
    Y = X @ cfg.beta_star + Zb + eps
    times = np.tile(np.arange(1, T + 1, dtype=float), n)
    ids = np.repeat(np.arange(id_offset, id_offset + n), T)
    ds = LongitudinalDataset.from_long(ids, times, Y, X, Z)
    truth = SimTruth(cfg.beta_star.copy(), cfg.D_star.copy(), cfg.sigma_eps, b, eps)
    return ds, truth


def generate(cfg: DgpConfig):
    """Training data and its truth; deterministic in ``cfg.seed``."""
    return _assemble(cfg, rng_stream(cfg.seed, _STREAM_TRAIN))


def generate_test_set(cfg: DgpConfig, n_test: int = 100, seed: Optional[int] = None):
    """Clean data with fresh subjects, random effects and errors and the same beta_star."""
    seed = cfg.seed if seed is None else seed
    return _assemble(replace(cfg, n=n_test), rng_stream(seed, _STREAM_TEST), id_offset=10**6)


def contaminate(dataset: LongitudinalDataset, truth: SimTruth, scenario: ScenarioConfig,
                seed: int = 0):
    """Apply S1 (none), S2 (vertical outliers in the error) or S3 (whole
    subjects moved far out in the active covariates and the response)."""
    if scenario.scenario == "S1":
        return dataset, truth
    rng = rng_stream(seed, _STREAM_CONTAM)
    Y = dataset.Y.copy()
    X = dataset.X.copy()
    if scenario.scenario == "S2":
        N = dataset.N
        m = round_half_up(scenario.pi * N)
        rows = np.sort(rng.choice(N, size=m, replace=False))
        eps = truth.eps.copy()
        eps[rows] = rng.normal(20.0, 1.0, size=m)
        Zb = np.einsum("ij,ij->i", dataset.Z, truth.b[dataset.subject_index])
        Y = X @ truth.beta_star + Zb + eps
        new_truth = replace(truth, eps=eps, contaminated=rows, contaminated_level="observation")
    else:
        n = dataset.n
        m = round_half_up(scenario.pi * n)
        subj = np.sort(rng.choice(n, size=m, replace=False))
        S = truth.support
        for i in subj:
            lo, hi = dataset.offsets[i], dataset.offsets[i + 1]
            # N(10, 0.1) read as variance 0.1
            X[lo:hi, S] = rng.normal(10.0, math.sqrt(0.1), size=(hi - lo, S.size))
            Y[lo:hi] = rng.normal(30.0, 1.0, size=hi - lo)
        new_truth = replace(truth, contaminated=subj, contaminated_level="subject")
    return _rebuild(dataset, Y, X), new_truth


def _rebuild(dataset: LongitudinalDataset, Y, X) -> LongitudinalDataset:
    blocks = []
    for k, blk in enumerate(dataset.subjects):
        lo, hi = dataset.offsets[k], dataset.offsets[k + 1]
        blocks.append(SubjectBlock(blk.id, blk.times, Y[lo:hi], X[lo:hi], blk.Z))
    return dataset.with_subjects(blocks)
