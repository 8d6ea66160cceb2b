"""Patient-flow modelling: trajectory mixtures, census forecasts, scheduling."""

from .types import (
    Hyperparams,
    MembershipMatrix,
    SmmParams,
    StateSpace,
    Trajectory,
    log_trajectory_likelihood,
    validate_params,
)

__version__ = "0.1.0"

__all__ = [
    "StateSpace",
    "Trajectory",
    "Hyperparams",
    "SmmParams",
    "MembershipMatrix",
    "validate_params",
    "log_trajectory_likelihood",
    "__version__",
]
