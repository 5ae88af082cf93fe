"""Gaussian-process regression on one-dimensional distributions with W2 kernels."""

from .dist_core import (EmpiricalDistribution, GridDensity, QuantileFunction,
                        quantile_from_density, quantile_from_samples, w2_distance)
from .errors import IllConditionedError, InvalidInputError, NumericError, WassGPError
from .gp_core import Dataset, FitConfig, GPModel, fit_ml, predict, predict_many
from .kernels import FbmSpec, LegendreSpec, PcaSpec, PowExpSpec

__version__ = "0.1.0"

__all__ = [
    "Dataset", "EmpiricalDistribution", "FbmSpec", "FitConfig", "GPModel", "GridDensity",
    "IllConditionedError", "InvalidInputError", "LegendreSpec", "NumericError", "PcaSpec",
    "PowExpSpec", "QuantileFunction", "WassGPError", "fit_ml", "predict", "predict_many",
    "quantile_from_density", "quantile_from_samples", "w2_distance",
]
