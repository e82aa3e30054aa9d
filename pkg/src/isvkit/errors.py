"""Exception hierarchy.

The CLI maps these onto exit codes: config errors -> 2, data errors -> 3,
numeric divergence -> 4.
"""


class IsvError(Exception):
    """Base class for all package errors."""


class ConfigError(IsvError, ValueError):
    pass


class DataError(IsvError, ValueError):
    pass


class DimensionError(DataError):
    pass


class LabelError(DataError):
    pass


class RangeError(DataError):
    pass


class CompositionError(DataError):
    """A batch or score set cannot form the required trials."""


class InsufficientTrialsError(CompositionError):
    pass


class MissingUtteranceError(DataError, KeyError):
    def __init__(self, ids, message=None):
        self.ids = list(ids)
        super().__init__(message or f"unresolvable utterance ids: {', '.join(self.ids)}")

    def __str__(self):
        return self.args[0]


class UndefinedScoreError(DataError):
    pass


class TooShortError(DataError):
    pass


class ParseError(DataError):
    pass


class DuplicateIdError(ParseError):
    pass


class FormatError(DataError):
    pass


class CorruptionError(FormatError):
    pass


class TrainingDivergenceError(IsvError, FloatingPointError):
    pass
