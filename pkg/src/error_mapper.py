"""
Error mapper for converting stray library exceptions to pipeline exceptions.

Maps stdlib, numpy and pandas failures that escape a stage onto the custom
exception hierarchy so the CLI reports them with a stable exit code.
"""

import json
from typing import Any, Dict, Optional

from pandas.errors import EmptyDataError, ParserError

from .exceptions import (
    RetinaVaeError,
    ArtifactParseError,
    FileSystemError,
    NumericError,
    ValidationError,
)


class ErrorMapper:
    """Maps library exceptions to custom exceptions."""

    @staticmethod
    def map_exception(
        exc: Exception,
        context: Optional[Dict[str, Any]] = None,
    ) -> RetinaVaeError:
        """Map a caught exception to our custom exception hierarchy.

        Args:
            exc: Original exception
            context: Additional context to attach to the mapped exception

        Returns:
            Mapped custom exception (the input itself if already mapped)

        Example:
            >>> try:
            ...     read_cohort(path)
            ... except Exception as e:
            ...     raise ErrorMapper.map_exception(e, {"path": str(path)})
        """
        if isinstance(exc, RetinaVaeError):
            return exc

        context = {**(context or {}), "original_error": type(exc).__name__}

        if isinstance(exc, FileNotFoundError):
            return FileSystemError(f"File not found: {exc.filename or exc}", context=context)

        if isinstance(exc, PermissionError):
            return FileSystemError(f"Permission denied: {exc.filename or exc}", context=context)

        # IsADirectoryError, disk full, etc.
        if isinstance(exc, OSError):
            return FileSystemError(f"Filesystem error: {exc}", context=context)

        if isinstance(exc, json.JSONDecodeError):
            return ArtifactParseError(
                f"Invalid JSON at line {exc.lineno}: {exc.msg}",
                context={**context, "line": exc.lineno},
            )

        if isinstance(exc, (ParserError, EmptyDataError)):
            return ArtifactParseError(f"Malformed CSV: {exc}", context=context)

        if isinstance(exc, (FloatingPointError, OverflowError)):
            return NumericError(f"Numeric failure: {exc}", context=context)

        if isinstance(exc, (ValueError, TypeError, KeyError)):
            return ValidationError(f"Invalid input: {exc}", context=context)

        return RetinaVaeError(f"Unexpected error: {exc}", context=context)
