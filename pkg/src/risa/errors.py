"""Exception hierarchy shared by every module."""


class RisaError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(RisaError, ValueError):
    """An argument broke an operation's precondition (shape, sign, range)."""


class ConfigError(RisaError, ValueError):
    """A configuration cannot be trained (bad hyperparameter, too few samples)."""


class DataError(RisaError, ValueError):
    """Malformed input data, e.g. an unparsable CSV row."""


class StateError(RisaError, RuntimeError):
    """An object was used out of order (backward before forward, reused tape)."""


class StaleMeansError(StateError):
    """Imputation was attempted with means from a different overlap split."""


class TrainingDivergence(RisaError, FloatingPointError):
    """A loss or gradient became non-finite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class EmptyTrainingSet(RisaError, RuntimeError):
    """Uncertainty filtering removed every remaining training sample."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
