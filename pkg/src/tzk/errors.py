"""Exception hierarchy shared by all modules."""


class TzkError(Exception):
    """Base class; CLI maps subclasses to exit categories."""

    category = "runtime"


class ContractViolation(TzkError):
    """A documented precondition was broken by the caller."""

    category = "contract"


class DomainError(TzkError):
    """An operation hit values outside its mathematical domain."""

    category = "domain"

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (first offending index {index})")
        self.index = index


class SingularLayerError(TzkError):
    """An invertible layer's weight matrix is numerically singular."""

    category = "singular-layer"


class OracleInvalid(TzkError):
    """A verification oracle's own preconditions do not hold."""

    category = "oracle"


class NonFiniteGradientError(TzkError):
    """A gradient contained NaN or infinity; the step was rejected."""

    category = "non-finite-gradient"

    def __init__(self, param_name):
        super().__init__(f"non-finite gradient for parameter '{param_name}'; step rejected")
        self.param_name = param_name


class FormatError(TzkError):
    """A file did not match its declared binary format."""

    category = "format"

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class ConfigError(TzkError):
    """Configuration failed validation."""

    category = "config"
