"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures
onto 1 (usage/config), 2 (data) and 3 (numeric).
"""


class OwrError(Exception):
    exit_code = 1


class ConfigError(OwrError):
    exit_code = 1


class ProtocolError(OwrError):
    """Operation called out of order (untrained model, bad label set, ...)."""

    exit_code = 1


class DataError(OwrError):
    exit_code = 2


class InputShapeError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(DataError):
    pass


class EmptyDataError(DataError):
    pass


class GenerationError(DataError):
    pass


class MissingClassError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DuplicateClassError(DataError):
    pass


class EmptyModelError(ProtocolError):
    pass


class OracleExhaustedError(DataError):
    pass


class NumericError(OwrError, ArithmeticError):
    exit_code = 3


class StaleCacheError(NumericError):
    pass
