"""Exception hierarchy shared by every cotolab module."""


class CotoError(Exception):
    """Base class for all library errors."""


class DimensionError(CotoError, ValueError):
    """Operand shapes do not agree."""


class NumericError(CotoError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class ContractError(CotoError, ValueError):
    """A precondition of an operation was violated."""


class ConfigurationError(CotoError, ValueError):
    """A configuration value is out of range or inconsistent."""


class ParseError(CotoError, ValueError):
    """Malformed tabular input. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(CotoError):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointDigestError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class TrainingDiverged(CotoError):
    """Raised when the training loss becomes non-finite.

    ``checkpoint`` holds the state at the last finite step for diagnosis.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
