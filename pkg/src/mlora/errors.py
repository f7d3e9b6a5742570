"""Exception hierarchy shared across the package."""


class MLoRAError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MLoRAError, ValueError):
    pass


class ParameterError(MLoRAError, ValueError):
    pass


class MissingDomainError(MLoRAError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ConflictError(MLoRAError):
    pass


class ConfigError(MLoRAError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class LabelError(MLoRAError, ValueError):
    pass


class SchemaError(MLoRAError, ValueError):
    pass


class DataError(MLoRAError, ValueError):
    pass


class UndefinedAUCError(MLoRAError, ValueError):
    """AUC was requested for a score set containing a single class."""


class EvaluationError(MLoRAError, ValueError):
    pass


class FormatError(MLoRAError, ValueError):
    """A checkpoint file is malformed; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
