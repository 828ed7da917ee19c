"""Estimation and prediction metrics, subject-level cross-validation and
resampling stability summaries."""

from __future__ import annotations

import hashlib
import itertools
import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .data import ModelFit
from .mixed_effects import reb_update_all
from .numerics import rng_stream
from .robust_init import MAD_CONSISTENCY, SIGMA_FLOOR, mad
from .weighting import weight_fn
from .solver import SolverConfig, lambda_grid, lambda_max, lambda_path, prepare, refine_fit

log = logging.getLogger(__name__)

_STREAM_FOLDS = 7


class InsufficientSubjects(ValueError):
    pass


@dataclass
class MetricsReport:
    mse_active: Optional[float] = None
    mse_inactive: Optional[float] = None
    tp: Optional[int] = None
    fp: Optional[int] = None
    cov_frobenius: Optional[float] = None
    mspe: Optional[float] = None
    mae: Optional[float] = None
    rmse: Optional[float] = None
    medae: Optional[float] = None
    subject_error_median: Optional[float] = None
    subject_error_iqr: Optional[float] = None
    model_size: Optional[int] = None

    def merged(self, other: "MetricsReport") -> "MetricsReport":
        mine = asdict(self)
        for k, v in asdict(other).items():
            if v is not None:
                mine[k] = v
        return MetricsReport(**mine)

    def as_dict(self) -> dict:
        return asdict(self)


def estimation_metrics(fit: ModelFit, truth) -> MetricsReport:
    """MSE on the true support and its complement, TP/FP at the fit's
    threshold and the Frobenius error of D (absent without random effects)."""
    beta = np.asarray(fit.beta, dtype=float)
    beta_star = np.asarray(truth.beta_star, dtype=float)
    if beta.shape != beta_star.shape:
        raise ValueError("fit and truth dimensions differ")
    p = beta.size
    S = truth.support
    Sc = np.setdiff1d(np.arange(p), S)
    err = beta - beta_star
    mse_s = float(np.sum(err[S] ** 2) / S.size) if S.size else 0.0
    mse_sc = float(np.sum(err[Sc] ** 2) / Sc.size) if Sc.size else 0.0
    sel = fit.support
    tp = int(np.intersect1d(sel, S).size)
    cov = None
    if fit.uses_random_effects:
        cov = float(np.linalg.norm(np.asarray(fit.D_hat) - np.asarray(truth.D_star), "fro"))
    return MetricsReport(mse_active=mse_s, mse_inactive=mse_sc, tp=tp, fp=int(sel.size - tp),
                         cov_frobenius=cov, model_size=int(sel.size))


def predict(fit: ModelFit, data) -> np.ndarray:
    """X beta + Z b_i for subjects, with b_i predicted from their own visits
    (weights one, D from the fit)."""
    fixed = data.X @ fit.beta
    if not fit.uses_random_effects:
        return fixed
    B, _ = reb_update_all(data, np.ones(data.N), fit.D_hat, fit.beta, resid=data.Y - fixed,
                          sigma2=fit.sigma2_hat)
    return fixed + np.einsum("ij,ij->i", data.Z, B[data.subject_index])


def error_metrics(y, yhat, subject_index=None) -> MetricsReport:
    e = np.asarray(y, dtype=float) - np.asarray(yhat, dtype=float)
    ae = np.abs(e)
    out = MetricsReport(mspe=float(np.mean(e * e)), mae=float(np.mean(ae)),
                        rmse=float(np.sqrt(np.mean(e * e))), medae=float(np.median(ae)))
    if subject_index is not None:
        idx = np.asarray(subject_index)
        per = np.bincount(idx, weights=ae) / np.bincount(idx)
        q1, med, q3 = np.percentile(per, [25, 50, 75])
        out = replace(out, subject_error_median=float(med), subject_error_iqr=float(q3 - q1))
    return out


def prediction_metrics(fit: ModelFit, test) -> MetricsReport:
    if test.p != fit.beta.size:
        raise ValueError("test data dimension differs from the fit")
    return error_metrics(test.Y, predict(fit, test), test.subject_index)


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CvResult:
    lambdas: np.ndarray
    curve: np.ndarray  # mean held-out loss per lambda
    fold_losses: np.ndarray  # (K, n_lambda)
    folds: np.ndarray  # fold label per subject
    lambda_best: float
    best_index: int
    path: list  # full-data (lambda, ModelFit) pairs

    @property
    def fold_hash(self) -> str:
        return hashlib.sha256(np.asarray(self.folds, dtype=np.int64).tobytes()).hexdigest()

    @property
    def best_fit(self) -> ModelFit:
        return self.path[self.best_index][1]


def validation_loss(fit_result: ModelFit, test, cfg: SolverConfig, kind: str = "weighted") -> float:
    """Held-out prediction loss.

    ``"mspe"`` is the plain mean squared error. ``"weighted"`` applies the
    estimator's own residual weight function (with the fit's discrepancy
    factor and the MAD scale of the held-out errors) both when predicting
    the held-out random effects and when averaging squared errors. Variants
    that do not reweight always get plain MSPE.
    """
    if kind == "mspe" or not cfg.uses_weights:
        e = test.Y - predict(fit_result, test)
        return float(np.mean(e * e))
    if kind != "weighted":
        raise ValueError(f"unknown validation loss {kind!r}")
    phi1 = cfg.weight_specs(test.p)[0]
    fixed = test.X @ fit_result.beta
    w = np.ones(test.N)
    # a few reweighting passes so outlying held-out visits do not drive b_i
    for _ in range(3):
        B, _ = reb_update_all(test, w, fit_result.D_hat, fit_result.beta, resid=test.Y - fixed,
                              sigma2=fit_result.sigma2_hat)
        e = test.Y - fixed - np.einsum("ij,ij->i", test.Z, B[test.subject_index])
        scale = max(MAD_CONSISTENCY * float(mad(e)), SIGMA_FLOOR)
        w = weight_fn(phi1, fit_result.delta * np.abs(e) / scale)
    total = float(np.sum(w))
    return float(np.sum(w * e * e) / total) if total > 0 else math.inf


def assign_folds(n: int, K: int, seed: int) -> np.ndarray:
    if K < 2:
        raise ValueError("K must be >= 2")
    if n < K:
        raise InsufficientSubjects(f"{n} subjects cannot fill {K} folds")
    perm = rng_stream(seed, _STREAM_FOLDS).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    for k, part in enumerate(np.array_split(perm, K)):
        folds[part] = k
    return folds


def select_index(curve, fold_losses, rule: str = "min") -> int:
    """Index on a decreasing grid chosen by ``rule``; ties go to the larger lambda."""
    curve = np.asarray(curve, dtype=float)
    best = int(np.flatnonzero(curve == np.nanmin(curve))[0])
    if rule == "min":
        return best
    if rule != "1se":
        raise ValueError(f"unknown selection rule {rule!r}")
    losses = np.asarray(fold_losses, dtype=float)
    se = losses[:, best].std(ddof=1) / np.sqrt(losses.shape[0])
    return int(np.flatnonzero(curve <= curve[best] + se)[0])


def cv_select(dataset, cfg: SolverConfig, K: int = 5, n_lambda: int = 30, *,
              folds: Optional[Sequence[int]] = None, loss: str = "weighted",
              rule: str = "min") -> CvResult:
    """K-fold subject-level CV over a grid shared by all folds.

    The grid comes from the full-data lambda_max; each fold refits the path
    on its training subjects and scores the held-out subjects' own visits
    data with :func:`validation_loss`. ``rule="min"`` takes the argmin of
    the mean curve; ``"1se"`` takes the largest lambda within one standard
    error of that minimum. Ties go to the larger lambda.
    ``folds`` overrides the seeded assignment (one label per subject).
    """
    n = dataset.n
    if folds is None:
        folds = assign_folds(n, K, cfg.seed)
    else:
        folds = np.asarray(folds, dtype=np.int64)
        if folds.shape != (n,):
            raise ValueError("need one fold label per subject")
        K = int(np.unique(folds).size)
        if K < 2:
            raise ValueError("need at least two folds")
    fold_cfg = replace(cfg, vc_refine_iter=0)
    prep = prepare(dataset, fold_cfg)
    lambdas = lambda_grid(lambda_max(dataset, fold_cfg, prep), n_lambda)
    labels = np.unique(folds)
    losses = np.empty((labels.size, lambdas.size))
    for row, k in enumerate(labels):
        train = dataset.subset(np.flatnonzero(folds != k))
        test = dataset.subset(np.flatnonzero(folds == k))
        path = lambda_path(train, fold_cfg, lambdas=lambdas)
        for j, (_, f) in enumerate(path):
            losses[row, j] = validation_loss(f, test, fold_cfg, loss)
    curve = losses.mean(axis=0)
    best = select_index(curve, losses, rule)
    full_path = lambda_path(dataset, fold_cfg, lambdas=lambdas, prep=prep)
    if cfg.vc_refine_iter > 0:
        lam, f = full_path[best]
        full_path[best] = (lam, refine_fit(dataset, f, cfg.vc_refine_iter, cfg.scale_aware_reb))
    return CvResult(lambdas, curve, losses, folds, float(lambdas[best]), best, full_path)


# ---------------------------------------------------------------------------
# stability
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StabilityReport:
    frequency: np.ndarray
    sign_consistency: np.ndarray  # NaN where never selected
    coef_median: np.ndarray  # over resamples where selected; NaN otherwise
    coef_iqr: np.ndarray
    mean_jaccard: float
    n_resamples: int


def jaccard(a, b) -> float:
    a, b = set(map(int, a)), set(map(int, b))
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def stability(fits: Sequence, tau: Optional[float] = None) -> StabilityReport:
    """Selection frequency, sign consistency, coefficient median/IQR and the
    mean pairwise Jaccard similarity over resample fits (or coefficient vectors)."""
    if len(fits) < 2:
        raise ValueError("need at least two fits")
    betas = np.array([np.asarray(getattr(f, "beta", f), dtype=float) for f in fits])
    taus = [tau if tau is not None else getattr(f, "tau_sel", 1e-8) for f in fits]
    sel = np.array([np.abs(b) > t for b, t in zip(betas, taus)])
    R, p = sel.shape
    counts = sel.sum(axis=0)
    freq = counts / R
    pos = ((betas > 0) & sel).sum(axis=0)
    neg = ((betas < 0) & sel).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        sign = np.where(counts > 0, np.maximum(pos, neg) / counts, np.nan)
    med = np.full(p, np.nan)
    iqr = np.full(p, np.nan)
    for j in np.flatnonzero(counts):
        vals = betas[sel[:, j], j]
        q1, m, q3 = np.percentile(vals, [25, 50, 75])
        med[j], iqr[j] = m, q3 - q1
    sets = [np.flatnonzero(row) for row in sel]
    pairs = [jaccard(a, b) for a, b in itertools.combinations(sets, 2)]
    return StabilityReport(freq, sign, med, iqr, float(np.mean(pairs)), R)
