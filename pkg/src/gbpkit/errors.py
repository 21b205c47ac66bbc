"""Exception types shared across the package."""


class GBPError(Exception):
    """Base class for package errors."""


class InvalidInputError(GBPError, ValueError):
    pass


class FormatError(GBPError, ValueError):
    """Raised when a file does not match the expected on-disk layout."""


class RankError(GBPError):
    """A sub-dictionary is column rank deficient."""

    def __init__(self, message, rank, expected):
        super().__init__(f"{message} (rank {rank}, expected {expected})")
        self.rank = rank
        self.expected = expected


class InvalidStructureError(GBPError, ValueError):
    pass


class PreconditionViolated(GBPError):
    def __init__(self, failing):
        self.failing = tuple(failing)
        super().__init__("certificate preconditions do not hold: " + ", ".join(self.failing))


class InfeasibleRequestError(GBPError):
    pass


class GenerationError(GBPError):
    pass


class TrainingDivergedError(GBPError):
    pass


class DeadDictionaryError(GBPError):
    pass


class ConfigError(GBPError):
    """Configuration problem; carries an optional source position."""

    def __init__(self, message, line=None, column=None):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + loc)
        self.line = line
        self.column = column
