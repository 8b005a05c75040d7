"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PSSPError(Exception):
    exit_code = 1


class ConfigError(PSSPError, ValueError):
    exit_code = 2


class DimensionError(PSSPError, ValueError):
    exit_code = 2


class ContractError(PSSPError, ValueError):
    exit_code = 2


class MissingFileError(PSSPError, FileNotFoundError):
    exit_code = 3


class FormatError(PSSPError, ValueError):
    exit_code = 4


class MalformedRecordError(FormatError):
    pass


class IntegrityError(PSSPError):
    exit_code = 5


class FetchError(PSSPError):
    exit_code = 6


class DivergenceError(PSSPError, ArithmeticError):
    exit_code = 7

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")


class NonFiniteError(PSSPError, ArithmeticError):
    exit_code = 7
