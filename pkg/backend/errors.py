"""
Error hierarchy for the AlphaSharpe toolkit.

Every error carries the process exit code the CLI reports for it.
"""


class AlphaSharpeError(Exception):
    """Base class for all toolkit errors"""
    exit_code = 1


class ConfigError(AlphaSharpeError):
    """Bad config file value, unknown key or invalid flag combination"""
    exit_code = 2


class DataError(AlphaSharpeError):
    exit_code = 3


class InputError(DataError):
    """Unreadable file, unparseable date or number"""


class ValidationError(DataError):
    """Input parsed but violates a domain invariant"""


class SizeError(DataError):
    """Series or window too short for the requested operation"""


class EmptyUniverseError(DataError):
    """No assets left to work with"""


class EmptyScoreError(DataError):
    """A metric produced no usable score for any asset"""


class FoldDegenerateError(DataError):
    def __init__(self, fold_index, n_assets: int):
        self.fold_index = fold_index
        self.n_assets = n_assets
        super().__init__(
            f"Fold {fold_index} has only {n_assets} jointly scored assets (need at least 3)"
        )


class NumericalError(AlphaSharpeError):
    exit_code = 4


class UndefinedCorrelationError(NumericalError):
    """Rank correlation requested for a vector with zero rank variance"""


class ConvergenceError(NumericalError):
    def __init__(self, message: str, spread: float):
        self.spread = spread
        super().__init__(f"{message} (achieved contribution spread {spread:.3e})")


class GenerationError(AlphaSharpeError):
    exit_code = 4


class TransportError(GenerationError):
    """The completion endpoint could not be reached"""


class GenerationRejectedError(GenerationError):
    """The completion endpoint answered, but never with a usable descriptor"""
