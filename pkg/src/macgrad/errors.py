"""Exception types shared across the library."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """An input violates a documented precondition (e.g. non-symmetric matrix)."""


class SingularMatrixError(RuntimeError):
    """Matrix is singular or too ill-conditioned to solve reliably."""


class StateError(RuntimeError):
    """Operation called in an invalid order (e.g. backward before forward)."""


class ParseError(ValueError):
    """Malformed input file; message includes the offending byte offset."""


class CheckpointError(ValueError):
    """Checkpoint is corrupt, has a wrong version, or is incompatible."""


class ConfigError(ValueError):
    """Run configuration failed validation."""


class NumericalFailure(RuntimeError):
    """Training produced non-finite values or an unsolvable preconditioner."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
