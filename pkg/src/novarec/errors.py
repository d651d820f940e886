class NovaError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(NovaError):
    exit_code = 1


class ParseError(NovaError):
    exit_code = 4

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(NovaError):
    """Raised for corrupt or mismatched binary containers."""

    exit_code = 4


class SplitError(NovaError):
    exit_code = 3


class AlignmentError(NovaError):
    exit_code = 3


class EvaluationError(NovaError):
    exit_code = 3


class SamplingError(NovaError):
    exit_code = 3


class DivergenceError(NovaError):
    exit_code = 5


class RecallUndefinedError(NovaError):
    exit_code = 3
