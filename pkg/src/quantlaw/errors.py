"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to.
"""


class QuantLawError(Exception):
    exit_code = 1


class InvalidInput(QuantLawError, ValueError):
    exit_code = 3


class InvalidFormat(InvalidInput):
    pass


class InvalidConfig(InvalidInput):
    pass


class CorruptCheckpoint(InvalidInput):
    pass


class SchemaError(InvalidInput):
    pass


class ParseError(InvalidInput):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConflictError(InvalidInput):
    pass


class RatioInfeasible(QuantLawError):
    exit_code = 4

    def __init__(self, message: str, closest: float):
        super().__init__(f"{message} (closest achievable ratio {closest:.6f})")
        self.closest = closest


class NumericError(QuantLawError):
    exit_code = 5


class DomainError(NumericError, ValueError):
    pass


class Underdetermined(NumericError):
    pass


class NoFittableData(NumericError):
    pass


class EmptyRun(NumericError):
    pass


class RunFailed(NumericError):
    pass
