"""Interventional indirect effects with cross-fitted one-step and targeted estimators."""

from __future__ import annotations

from .data import (
    ArmSpec,
    ConfigError,
    CrossFitPlan,
    EstimandSpec,
    EstimationError,
    MediatorPartition,
    ObservationTable,
    load_table,
    partition_folds,
    save_table,
)
from .estimators import EstimateResult, estimate, one_step, replicate, tml, wald_ci
from .nuisance import LearnerStacks, fit_nuisances
from .oracle import DiscreteLaw, canonical_law, exact_theta, sample

__version__ = "0.1.0"

__all__ = [
    "ArmSpec", "ConfigError", "CrossFitPlan", "DiscreteLaw", "EstimandSpec", "EstimateResult",
    "EstimationError", "LearnerStacks", "MediatorPartition", "ObservationTable",
    "canonical_law", "estimate", "exact_theta", "fit_nuisances", "load_table", "one_step",
    "partition_folds", "replicate", "sample", "save_table", "tml", "wald_ci",
]
