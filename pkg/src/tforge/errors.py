"""Exception hierarchy shared by all tforge modules.

The CLI maps :class:`UsageError` (and subclasses) to exit code 2 and every
other :class:`TForgeError` to exit code 3.
"""


class TForgeError(Exception):
    pass


class UsageError(TForgeError):
    """Bad request from the caller: unknown ids, degenerate sizes, missing paths."""


class ConfigError(UsageError):
    pass


class ParameterError(TForgeError, ValueError):
    """Invalid parameters for an injector, loss or transform."""


class DatasetError(TForgeError):
    """A dataset file is missing or corrupt."""


class SamplingError(TForgeError):
    pass


class EvaluationError(TForgeError):
    """Nothing left to evaluate on (e.g. every sample belongs to the target class)."""


class TrainingError(TForgeError):
    pass


class InversionError(TForgeError):
    pass
