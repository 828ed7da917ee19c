"""Core domain types for longitudinal mixed-model data and fits."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Hashable, Sequence

import numpy as np

SELECTION_TAU = 1e-8
D_FLOOR = 1e-6


class ValidationError(ValueError):
    """Raised with the full list of violated dataset invariants."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SubjectBlock:
    """All visits of one subject: response, designs and visit times."""

    id: Hashable
    times: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen(self.times))
        object.__setattr__(self, "Y", _frozen(self.Y))
        object.__setattr__(self, "X", _frozen(self.X))
        object.__setattr__(self, "Z", _frozen(self.Z))

    @property
    def T(self) -> int:
        return int(self.Y.shape[0])


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """Per-subject blocks plus stacked (long-format) views used by the solvers.

    Construction does not validate; call :func:`validate` on untrusted input.
    """

    subjects: tuple
    p: int
    q: int

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))

    @classmethod
    def from_long(cls, ids, times, y, X, Z) -> "LongitudinalDataset":
        """Build from long-format rows; rows of one subject must be contiguous."""
        ids = list(ids)
        X = np.asarray(X, dtype=float)
        Z = np.asarray(Z, dtype=float)
        y = np.asarray(y, dtype=float)
        times = np.asarray(times, dtype=float)
        blocks = []
        start = 0
        for k in range(1, len(ids) + 1):
            if k == len(ids) or ids[k] != ids[start]:
                sl = slice(start, k)
                blocks.append(SubjectBlock(ids[start], times[sl], y[sl], X[sl], Z[sl]))
                start = k
        return cls(tuple(blocks), X.shape[1], Z.shape[1])

    @property
    def n(self) -> int:
        return len(self.subjects)

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.array([s.T for s in self.subjects], dtype=np.int64)

    @property
    def N(self) -> int:
        return int(self.sizes.sum())

    @cached_property
    def offsets(self) -> np.ndarray:
        """Row offsets; subject i occupies rows ``offsets[i]:offsets[i+1]``."""
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(np.int64)

    @cached_property
    def subject_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), self.sizes)

    def _stack(self, attr: str) -> np.ndarray:
        out = np.concatenate([getattr(s, attr) for s in self.subjects], axis=0)
        out.setflags(write=False)
        return out

    @cached_property
    def Y(self) -> np.ndarray:
        return self._stack("Y")

    @cached_property
    def X(self) -> np.ndarray:
        return self._stack("X")

    @cached_property
    def Xf(self) -> np.ndarray:
        """Column-major copy of X for coordinate-wise access."""
        out = np.asfortranarray(self.X)
        out.setflags(write=False)
        return out

    @cached_property
    def Z(self) -> np.ndarray:
        return self._stack("Z")

    @cached_property
    def times(self) -> np.ndarray:
        return self._stack("times")

    @property
    def ids(self) -> list:
        return [s.id for s in self.subjects]

    def subset(self, indices) -> "LongitudinalDataset":
        return LongitudinalDataset(tuple(self.subjects[i] for i in indices), self.p, self.q)

    def with_subjects(self, blocks) -> "LongitudinalDataset":
        return LongitudinalDataset(tuple(blocks), self.p, self.q)


def validate(dataset: LongitudinalDataset) -> None:
    """Check every dataset invariant; raise :class:`ValidationError` listing all failures."""
    problems = []
    p, q = dataset.p, dataset.q
    if len(dataset.subjects) == 0:
        problems.append("dataset has no subjects (N must be >= 1)")
    seen = set()
    for k, s in enumerate(dataset.subjects):
        tag = f"subject {s.id!r} (#{k})"
        if s.id in seen:
            problems.append(f"duplicate subject id {s.id!r}")
        seen.add(s.id)
        T = s.Y.shape[0]
        if s.Y.ndim != 1:
            problems.append(f"{tag}: Y must be a vector")
        if T < 1:
            problems.append(f"{tag}: no visits")
        if s.X.ndim != 2 or s.X.shape != (T, p):
            problems.append(f"{tag}: dimension mismatch, X has shape {s.X.shape}, expected {(T, p)}")
        if s.Z.ndim != 2 or s.Z.shape != (T, q):
            problems.append(f"{tag}: dimension mismatch, Z has shape {s.Z.shape}, expected {(T, q)}")
        if s.times.shape != (T,):
            problems.append(f"{tag}: dimension mismatch, times has length {s.times.shape[0]}, expected {T}")
        for name in ("Y", "X", "Z", "times"):
            if not np.all(np.isfinite(getattr(s, name))):
                problems.append(f"{tag}: non-finite entry in {name}")
        if s.times.ndim == 1 and s.times.size > 1 and np.all(np.isfinite(s.times)):
            if np.any(np.diff(s.times) <= 0):
                problems.append(f"{tag}: times not strictly increasing")
    if problems:
        raise ValidationError(problems)


def support(beta, tau: float = SELECTION_TAU) -> np.ndarray:
    """Indices with ``|beta_j| > tau``, ascending."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return np.flatnonzero(np.abs(np.asarray(beta, dtype=float)) > tau)


@dataclass(frozen=True)
class ConvergenceTrace:
    rel_change: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    delta: list = field(default_factory=list)
    zero_weights: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rel_change)

    def as_dict(self) -> dict:
        return {
            "rel_change": list(map(float, self.rel_change)),
            "objective": list(map(float, self.objective)),
            "delta": list(map(float, self.delta)),
            "zero_weights": list(map(int, self.zero_weights)),
        }


@dataclass(frozen=True, eq=False)
class ModelFit:
    """Result of a fit: fixed effects, predicted random effects, variance
    components, final observation weights and the outer-loop trace."""

    beta: np.ndarray
    b_hat: np.ndarray  # (n, q)
    D_hat: np.ndarray
    sigma2_hat: float
    weights: object  # WeightState
    trace: ConvergenceTrace
    iterations: int
    lam: float = 0.0
    variant: str = "darr"
    converged: bool = True
    tau_sel: float = SELECTION_TAU
    uses_random_effects: bool = True

    @property
    def support(self) -> np.ndarray:
        return support(self.beta, self.tau_sel)

    @property
    def delta(self) -> float:
        return float(self.weights.delta)
