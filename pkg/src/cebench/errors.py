"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DependencyError -> 3,
TrainingError / NumericError -> 4.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class ParameterError(ValueError):
    """A parameter is outside its valid range."""


class OrderingError(ValueError):
    """Timestep ordering constraint violated."""


class ContractError(RuntimeError):
    """An API contract was violated (e.g. non-scalar backward root)."""


class UnavailableError(RuntimeError):
    """Requested data is not available on this handle/backend."""


class ConfigError(ValueError):
    """Bad run configuration (unknown key, unparsable value)."""


class DependencyError(RuntimeError):
    """A required artifact is missing; names the producing subcommand."""


class TrainingError(RuntimeError):
    """Training diverged or failed a post-condition."""
