"""Exceptions raised by ivpsr, each carrying a process exit code."""
from typing import Optional

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class PsrError(Exception):
    exit_code = EXIT_RUNTIME

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigError(PsrError):
    exit_code = EXIT_CONFIG


class SequenceParseError(PsrError):
    def __init__(self, detail: str, line: int):
        super().__init__(f"line {line}: {detail}")
        self.line = line


class SequenceFormatError(PsrError):
    pass


class EmptyDatasetError(PsrError):
    pass


class RegressionError(PsrError):
    pass


class LayoutError(PsrError):
    pass


class DegenerateNormalizerError(PsrError):
    def __init__(self, detail: str, value: float = 0.0):
        super().__init__(detail)
        self.value = value


class ConditioningError(PsrError):
    pass


class KernelSolveError(PsrError):
    pass


class BoundInputError(PsrError):
    pass
