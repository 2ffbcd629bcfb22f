"""Bayesian reconciliation of hierarchical time-series forecasts.

Bottom-level series and their sums are forecast independently by Gaussian
processes; the bottom forecasts are then updated with the information in the
summary forecast, in closed form for linear sums and Gaussian forecasts.
"""
from .errors import (
    ConfigError,
    ContractViolation,
    DataError,
    FitFailureError,
    HtsrError,
    IncoherentForecastsError,
    NotPositiveDefiniteError,
    OracleFailureError,
    SingularPushforwardError,
    ZeroDensityError,
)
from .gaussian import Gaussian, affine_pushforward, condition, log_pdf, sample
from .hierarchy import Hierarchy, from_groups, parse_hierarchy
from .kernels import parse_kernel
from .reconcile import (
    BaseForecasts,
    ReconciledPosterior,
    grid_posterior_moments,
    log_posterior_unnorm,
    reconcile_lg,
)

__version__ = "0.1.0"

__all__ = [
    "BaseForecasts",
    "ConfigError",
    "ContractViolation",
    "DataError",
    "FitFailureError",
    "Gaussian",
    "Hierarchy",
    "HtsrError",
    "IncoherentForecastsError",
    "NotPositiveDefiniteError",
    "OracleFailureError",
    "ReconciledPosterior",
    "SingularPushforwardError",
    "ZeroDensityError",
    "affine_pushforward",
    "condition",
    "from_groups",
    "grid_posterior_moments",
    "log_pdf",
    "log_posterior_unnorm",
    "parse_hierarchy",
    "parse_kernel",
    "reconcile_lg",
    "sample",
]
