"""Difference-in-differences with a misclassified (under-reported) treatment.

The package estimates the ATT in a two-period design where some truly treated
units are recorded as untreated. A partial observability probit recovers the
true-treatment propensity, which then replaces the observed treatment in the
first-difference (panel) or pooled (repeated cross section) regression.
"""

from __future__ import annotations

from .data import DataError, Dataset, DemeanedDesign, Roles, demean, first_difference, ingest_csv, write_csv
from .estimators import (
    BootstrapPlan,
    DidEstimate,
    EstimationData,
    EstimationError,
    avar_fd_twostep,
    avar_pols_twostep,
    bootstrap_se,
    did_fd_naive,
    did_fd_twostep,
    did_pols_naive,
    did_pols_twostep,
)
from .numerics import bvn_cdf, tallis_moment
from .pop import IdentificationError, PopFit, PopSpec, pop_fit, pop_loglik, pop_score, predict_dstar

__version__ = "0.1.0"

__all__ = [
    "DataError", "Dataset", "DemeanedDesign", "Roles", "demean", "first_difference",
    "ingest_csv", "write_csv", "BootstrapPlan", "DidEstimate", "EstimationData",
    "EstimationError", "avar_fd_twostep", "avar_pols_twostep", "bootstrap_se", "did_fd_naive",
    "did_fd_twostep", "did_pols_naive", "did_pols_twostep", "bvn_cdf", "tallis_moment",
    "IdentificationError", "PopFit", "PopSpec", "pop_fit", "pop_loglik", "pop_score",
    "predict_dstar", "__version__",
]
