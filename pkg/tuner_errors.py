#!/usr/bin/env python3
"""
HES Tuner errors
Exception hierarchy shared by the solver stack, the optimizer and the CLI.
"""

from typing import Any, Optional


class HesTunerError(Exception):
    """Base exception for all tuner errors."""
    pass


class ConfigError(HesTunerError):
    """Raised when a configuration file, flag or environment value is invalid."""
    pass


class MatrixFormatError(HesTunerError):
    """Raised when a Matrix Market file cannot be parsed."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class SizingError(HesTunerError):
    """Raised when a generated problem would not fit in addressable memory."""
    pass


class DimensionMismatchError(HesTunerError):
    """Raised when vector and matrix dimensions disagree."""
    pass


class HierarchyError(HesTunerError):
    """Raised when the multigrid hierarchy cannot be built."""

    def __init__(self, message: str, level: Optional[int] = None):
        if level is not None:
            message = f"level {level}: {message}"
        super().__init__(message)
        self.level = level


class SearchSpaceError(HesTunerError):
    """Raised when a search space definition is malformed."""
    pass


class OffGridError(SearchSpaceError):
    """Raised when a value does not lie on a parameter grid."""

    def __init__(self, parameter: str, value: Any):
        super().__init__(f"value {value!r} of parameter '{parameter}' is not on its grid")
        self.parameter = parameter
        self.value = value


class DatasetError(HesTunerError):
    """Raised when a dataset is malformed or unsuitable for the requested stage."""
    pass


class FingerprintMismatchError(HesTunerError):
    """Raised when artifacts built for different search spaces are combined."""
    pass


class ModelError(HesTunerError):
    """Raised when a model file is unreadable or a model is used incorrectly."""
    pass


class InfeasibleError(HesTunerError):
    """Raised when the optimizer finds no converging configuration."""

    def __init__(self, message: str, trace: Any = None):
        super().__init__(message)
        self.trace = trace


class SsmcDownloadError(HesTunerError):
    """Raised when a SuiteSparse collection matrix cannot be fetched."""
    pass
