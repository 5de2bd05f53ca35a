"""
Every error raised by `xosda` derives from `XosdaError`.

Most also inherit a builtin (`ValueError`, `ArithmeticError`, ...) so callers that
don't know about this module can still catch them in the usual way.
"""


class XosdaError(Exception):
    pass


class ConfigError(XosdaError, ValueError):
    pass


# It's both an attribute and a value error
# (attribute is missing and/or value has some other issue)
# `AttributeError` lets documentation tools skip the value safely.
class SettingsValueError(ConfigError, AttributeError):
    pass


class SettingsConversionError(ConfigError, AttributeError):
    pass


class InvalidConfig(ConfigError):
    pass


class DataError(XosdaError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, *, path=None, line: int = None):
        self.path = path
        self.line = line
        where = f"{path}:{line}" if path is not None else f"line {line}"
        super().__init__(f"{where}: {message}")


class CheckpointError(DataError):
    pass


class ShapeError(XosdaError, ValueError):
    pass


class DegenerateVector(XosdaError, ValueError):
    pass


class InvalidClassCount(XosdaError, ValueError):
    pass


class InvalidLabel(XosdaError, ValueError):
    pass


class InvalidUncertainty(XosdaError, ValueError):
    pass


class InsufficientSamples(XosdaError, ValueError):
    pass


class EmptyBatch(XosdaError, ValueError):
    pass


class NumericalError(XosdaError, ArithmeticError):
    pass


class NonFiniteGradient(NumericalError):
    def __init__(self, message: str, *, term: str = None):
        self.term = term
        if term:
            message = f"{message} (loss term: {term})"
        super().__init__(message)


class NonFiniteLoss(NumericalError):
    pass


class ClusteringError(NumericalError):
    pass


class SampleSkipped(XosdaError):
    """ Not fatal; the sample contributes nothing to the contrastive term. """
    pass
