"""Exception types shared across the package."""


class MoreError(Exception):
    """Base class for all package errors."""


class InvalidInput(MoreError, ValueError):
    pass


class InvalidConfig(MoreError, ValueError):
    pass


class UndefinedSNR(MoreError, ValueError):
    pass


class NumericalFailure(MoreError, ArithmeticError):
    """Raised when a loss or gradient turns non-finite.

    ``partial`` optionally carries whatever was computed before the failure
    (an attack trace, a loss curve).
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class CheckpointError(MoreError):
    pass


class FormatError(MoreError, ValueError):
    pass


class VocabError(MoreError, KeyError):
    def __init__(self, word):
        super().__init__(word)
        self.word = word

    def __str__(self):
        return f"word not in vocabulary: {self.word!r}"


class DegenerateHypothesis(MoreError, ValueError):
    pass


class ScheduleExhausted(MoreError):
    pass
