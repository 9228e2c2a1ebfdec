"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DinError(Exception):
    exit_code = 1


class ConfigError(DinError, ValueError):
    exit_code = 2


class DataError(DinError, ValueError):
    exit_code = 3


class NumericalError(DinError, ArithmeticError):
    exit_code = 4
