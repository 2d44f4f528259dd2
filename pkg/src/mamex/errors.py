"""Exception hierarchy shared by all modules.

The CLI maps the three top-level families (config, data, runtime) to
distinct exit codes.
"""


class MamexError(Exception):
    pass


class ConfigError(MamexError, ValueError):
    pass


class ParameterError(ConfigError):
    """Argument outside its allowed range (k, K, ratios, sizes...)."""


class DataError(MamexError, ValueError):
    pass


class ParseError(DataError):
    pass


class FormatError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class ProtocolError(DataError):
    """Evaluation requested on a partition that cannot be evaluated."""


class NumericError(MamexError, ValueError):
    pass


class DimensionError(NumericError):
    pass


class ShapeError(NumericError):
    pass


class DomainError(NumericError):
    pass


class UsageError(MamexError, RuntimeError):
    pass


class IntegrityError(MamexError, RuntimeError):
    pass


class CheckpointMismatch(MamexError, RuntimeError):
    pass


class DivergenceError(MamexError, RuntimeError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
