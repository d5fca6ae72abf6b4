"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MCSSError(Exception):
    exit_code = 4
    kind = "error"


class ConfigError(MCSSError, ValueError):
    exit_code = 1
    kind = "config"


class InvalidArgumentError(MCSSError, ValueError):
    exit_code = 1
    kind = "invalid-argument"


class DataIOError(MCSSError, OSError):
    exit_code = 2
    kind = "io"


class ParseError(MCSSError, ValueError):
    exit_code = 3
    kind = "parse"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(MCSSError, ValueError):
    exit_code = 3
    kind = "validation"


class NumericError(MCSSError, ArithmeticError):
    exit_code = 4
    kind = "numeric"


class DegeneratePoseError(NumericError):
    kind = "degenerate-pose"


class DegenerateGeometryError(NumericError):
    kind = "degenerate-geometry"


class ProjectionError(NumericError):
    kind = "projection"


class BatchConstructionError(MCSSError, RuntimeError):
    exit_code = 5
    kind = "batch-construction"


class InsufficientCandidatesError(MCSSError, ValueError):
    exit_code = 5
    kind = "insufficient-candidates"


class InsufficientDataError(MCSSError, ValueError):
    exit_code = 3
    kind = "insufficient-data"
