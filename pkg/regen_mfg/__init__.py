# Copyright 2025 Raza Ahmad. Licensed under Apache 2.0.

"""
Regenerative deep policy iteration for finite-horizon mean-field games.
"""

from .exceptions import (
    CompatibilityError,
    ConfigError,
    ConsistencyError,
    DivergenceError,
    IntegrationError,
    MeasureError,
    MetricError,
    MfgError,
    ReferenceSolveError,
    ShapeError,
    UsageError,
)
from .models import RunConfig, TrainerConfig, load_config
from .problem import MfgProblem, make_problem
from .trainer import PolicyIterationTrainer, run_policy_iteration

__version__ = "0.1.0"

__all__ = [
    "CompatibilityError",
    "ConfigError",
    "ConsistencyError",
    "DivergenceError",
    "IntegrationError",
    "MeasureError",
    "MetricError",
    "MfgError",
    "MfgProblem",
    "PolicyIterationTrainer",
    "ReferenceSolveError",
    "RunConfig",
    "ShapeError",
    "TrainerConfig",
    "UsageError",
    "load_config",
    "make_problem",
    "run_policy_iteration",
]
