"""Exception hierarchy shared by every weakts module."""


class WeakTSError(Exception):
    pass


class DimensionError(WeakTSError, ValueError):
    """Shapes of the operands are incompatible."""


class ConfigurationError(WeakTSError, ValueError):
    """A configuration value is outside its allowed range."""


class ContractError(WeakTSError, ValueError):
    """A precondition of an operation does not hold for the given inputs."""


class TapeError(WeakTSError, RuntimeError):
    """Gradient recording was used incorrectly (detached loss, reused tape)."""


class NumericError(WeakTSError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class TrainingError(WeakTSError, RuntimeError):
    """Optimisation produced a non-finite loss."""


class ParseError(WeakTSError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
