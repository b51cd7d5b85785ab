"""
Custom exception hierarchy for the retina latent-code pipeline.

Every pipeline failure carries a human-readable message, structured context
for logging, and the exit code the CLI returns for it.
"""

from typing import Any, Dict, Optional


class RetinaVaeError(Exception):
    """Base exception for all pipeline errors.

    Attributes:
        message: Human-readable error message
        context: Additional context information (dict)
        exit_code: Exit code for the CLI
    """

    DEFAULT_EXIT_CODE = 1

    def __init__(
        self,
        message: str,
        context: Optional[Dict[str, Any]] = None,
        exit_code: Optional[int] = None,
    ):
        """Initialize exception.

        Args:
            message: Error message
            context: Additional context (e.g., path, line, epoch)
            exit_code: Override default exit code
        """
        super().__init__(message)
        self.message = message
        self.context = context or {}
        self.exit_code = exit_code if exit_code is not None else self.DEFAULT_EXIT_CODE

    def to_dict(self) -> Dict[str, Any]:
        """Convert exception to dictionary for structured logging.

        Returns:
            Dictionary representation of the exception
        """
        return {
            "error_type": self.__class__.__name__,
            "message": self.message,
            "exit_code": self.exit_code,
            "context": self.context,
        }


class ConfigurationError(RetinaVaeError):
    """Configuration errors (unknown keys, bad values, missing .env).

    Exit code: 1
    """

    DEFAULT_EXIT_CODE = 1


class ValidationError(RetinaVaeError):
    """Invalid command-line input or violated precondition.

    Exit code: 1
    """

    DEFAULT_EXIT_CODE = 1


class InvalidModelError(ValidationError):
    """A disease sampling model or probability vector is malformed."""


class EmptyCohortError(ValidationError):
    """A cohort with zero records was requested or supplied where one is required."""


class CodecError(ValidationError):
    """A feature vector cannot be decoded back into a patient profile."""


class InfeasibleError(ValidationError):
    """Clustering asked for more centroids than there are points."""


class CohortParseError(RetinaVaeError):
    """Malformed cohort CSV. The context names the offending line.

    Exit code: 2
    """

    DEFAULT_EXIT_CODE = 2


class ArtifactParseError(RetinaVaeError):
    """Malformed weights, history or latents artifact.

    Exit code: 2
    """

    DEFAULT_EXIT_CODE = 2


class JoinError(RetinaVaeError):
    """A latent point references a record id missing from the cohort.

    Exit code: 2
    """

    DEFAULT_EXIT_CODE = 2


class NumericError(RetinaVaeError):
    """NaN or infinite values in parameters, activations or losses.

    Exit code: 3
    """

    DEFAULT_EXIT_CODE = 3


class ShapeMismatchError(RetinaVaeError):
    """Parameter, gradient or optimizer-state shapes disagree.

    Exit code: 3
    """

    DEFAULT_EXIT_CODE = 3


class FileSystemError(RetinaVaeError):
    """File system errors (unwritable output, missing input file).

    Exit code: 4
    """

    DEFAULT_EXIT_CODE = 4
