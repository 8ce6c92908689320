"""Exception types shared across the package."""

from __future__ import annotations


class DegenerateInputError(ValueError):
    """Raised when an input is numerically degenerate (near-zero norm, parallel
    basis vectors, vanishing homogeneous coordinate)."""


class ParseError(ValueError):
    """Malformed on-disk data. Carries the offending path and byte offset."""

    def __init__(self, message: str, path: str = "", offset: int | None = None):
        detail = message
        if path:
            detail += f" (file: {path}"
            if offset is not None:
                detail += f", byte offset: {offset}"
            detail += ")"
        super().__init__(detail)
        self.path = path
        self.offset = offset


class GenerationError(RuntimeError):
    """A scene spec could not be realized (e.g. frustum coverage unmet)."""


class SamplingError(RuntimeError):
    """No admissible view sample exists for the requested configuration."""


class DivergenceError(RuntimeError):
    """Optimization produced non-finite values. Names the parameter class."""

    def __init__(self, message: str, parameter_class: str = ""):
        super().__init__(message)
        self.parameter_class = parameter_class
