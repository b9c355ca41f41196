"""Exception hierarchy shared by the library and the CLI.

Each class carries the CLI exit code it maps to.
"""


class HeartMorphError(Exception):
    exit_code = 1


class ConfigError(HeartMorphError, ValueError):
    """Invalid parameters, unknown names, inconsistent settings."""

    exit_code = 2


class DataError(HeartMorphError, ValueError):
    """Malformed files, non-finite values, shape mismatches."""

    exit_code = 3


class ParseError(DataError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class NumericalError(HeartMorphError, ArithmeticError):
    """Fitting or training failed numerically."""

    exit_code = 4


class TrainingDivergedError(NumericalError):
    def __init__(self, iteration, loss):
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")
        self.iteration = iteration
        self.loss = loss


class FoldError(NumericalError):
    def __init__(self, fold, cause):
        super().__init__(f"fitting failed in fold {fold}: {cause}")
        self.fold = fold
        self.cause = cause
