"""Supervised integrated factor analysis for multi-view data with covariates."""
from sifa.core import (
    TOL,
    CovariateMap,
    FitOptions,
    FitReport,
    LatentMoments,
    MultiViewDataset,
    RankSet,
    SifaParams,
    check_conditions,
    fix_signs,
    validate_dataset,
)
from sifa.em import e_step, fit, init_params, log_likelihood

__version__ = "0.1.0"

__all__ = [
    "TOL",
    "CovariateMap",
    "FitOptions",
    "FitReport",
    "LatentMoments",
    "MultiViewDataset",
    "RankSet",
    "SifaParams",
    "check_conditions",
    "e_step",
    "fit",
    "fix_signs",
    "init_params",
    "log_likelihood",
    "validate_dataset",
]
