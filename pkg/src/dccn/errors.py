"""Exception types.  Each carries a short machine-readable ``code``."""


class DCCNError(Exception):
    code = "E_DCCN"


class DimensionError(DCCNError, ValueError):
    code = "E_DIM"


class ConfigError(DCCNError, ValueError):
    code = "E_CONFIG"


class UsageError(DCCNError, RuntimeError):
    code = "E_USAGE"


class InputError(DCCNError, ValueError):
    code = "E_INPUT"


class NumericError(DCCNError, ArithmeticError):
    code = "E_NUMERIC"

    def __init__(self, message, iteration=None, name=None):
        super().__init__(message)
        self.iteration = iteration
        self.name = name


class FormatError(DCCNError, ValueError):
    code = "E_FORMAT"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
