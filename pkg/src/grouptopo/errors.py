"""Exception types shared across the package.

Exit-code mapping used by the CLI: usage errors exit 1, ValidationError
exits 2, BackendError exits 3.
"""

from __future__ import annotations


class GroupTopoError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(GroupTopoError):
    """Raised when data, graphs, records, or checkpoints fail validation."""

    def __init__(self, message: str, *, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class BackendError(GroupTopoError):
    """Raised when an external backend (encoder or agent LLM) fails."""
