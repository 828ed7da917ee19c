"""Doubly adaptive robust penalized estimation for high-dimensional
longitudinal linear mixed models."""

from .data import LongitudinalDataset, ModelFit, SubjectBlock, support, validate
from .penalty import PenaltySpec
from .solver import NotConverged, SolverConfig, fit, lambda_path

__all__ = [
    "LongitudinalDataset", "ModelFit", "NotConverged", "PenaltySpec", "SolverConfig",
    "SubjectBlock", "fit", "lambda_path", "support", "validate",
]

__version__ = "0.1.0"
