"""Exception hierarchy.

Every error the library raises derives from :class:`ScotoscopeError`. The
CLI maps :class:`DataError` subclasses to exit code 2 and anything else to 3.
"""


class ScotoscopeError(Exception):
    """Base class for all library errors."""


class DataError(ScotoscopeError, ValueError):
    """Input data or configuration is invalid."""


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class ValidationError(DataError):
    pass


class EmptyDataset(DataError):
    pass


class IoError(ScotoscopeError, OSError):
    pass


class ConfigError(DataError):
    pass


class TooShort(DataError):
    pass


class InsufficientData(DataError):
    pass


class NoDonorAvailable(DataError):
    pass


class MissingSubjectMean(DataError, KeyError):
    pass


class InsufficientSubjects(DataError):
    pass


class MissingClass(DataError):
    pass


class LengthMismatch(DataError):
    pass


class NotNormalized(DataError):
    pass


class NonPositiveSignal(DataError):
    pass


class EmptyTestSet(DataError):
    pass


class SingleClassTrainSet(DataError):
    pass


class BatchTooSmall(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class InputTooShort(DataError):
    pass
