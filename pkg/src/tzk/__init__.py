"""Conditional probability-flow generative model.

An invertible flow gives exact log-likelihoods; independent knowledge types
(a presence bit plus a continuous characteristic) attach discriminators and
conditional priors to it, trained jointly through a consistency objective
with per-knowledge gap constraints.
"""

from .config import Config
from .errors import (ConfigError, ContractViolation, DomainError, FormatError,
                     NonFiniteGradientError, OracleInvalid, SingularLayerError, TzkError)
from .flows import FlowStack
from .model import TzkModel, build_model
from .tensor import Tape, Tensor, backward, finite_diff_check, gaussian_logpdf, reparam_sample

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backward", "finite_diff_check", "gaussian_logpdf", "reparam_sample",
    "FlowStack", "TzkModel", "build_model", "Config",
    "TzkError", "ContractViolation", "DomainError", "SingularLayerError", "OracleInvalid",
    "NonFiniteGradientError", "FormatError", "ConfigError", "__version__",
]
