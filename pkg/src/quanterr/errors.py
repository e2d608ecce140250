"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class QuantErrError(Exception):
    exit_code = 1


class ConfigError(QuantErrError, ValueError):
    exit_code = 2


class DataFormatError(QuantErrError, ValueError):
    exit_code = 3
    code = "format"


class MagicError(DataFormatError):
    code = "bad-magic"


class ShapeError(DataFormatError):
    code = "shape-mismatch"


class TruncatedError(DataFormatError):
    code = "truncated"


class NumericError(QuantErrError, ArithmeticError):
    exit_code = 4


class CorrelationUndefinedError(NumericError):
    """Raised for zero-variance inputs instead of returning a silent 0."""


class SingularHessianError(NumericError):
    pass


class MissingTapError(QuantErrError, KeyError):
    exit_code = 2


class UnknownDocError(ConfigError, KeyError):
    pass
