"""PAC-Bayes generalisation bounds for physics-informed neural networks."""

from .config import RunConfig, make_config
from .errors import (
    ContractError,
    EstimationFailure,
    MissingArtifactError,
    NumericFailure,
    ParseError,
    VacuousBoundError,
)

__all__ = [
    "RunConfig",
    "make_config",
    "ContractError",
    "EstimationFailure",
    "MissingArtifactError",
    "NumericFailure",
    "ParseError",
    "VacuousBoundError",
]
