"""
Output handler for pipeline artifacts.

Writes CSV, JSON and text artifacts atomically: each file is written to a
temporary sibling first and moved into place, so a failed command never
leaves a truncated artifact behind.
"""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd

from .exceptions import FileSystemError
from .logger import log_struct


def atomic_write_text(path: Path, text: str) -> Path:
    """Write text to path via a temporary file in the same directory.

    Args:
        path: Destination file
        text: Full file content (written as UTF-8 with '\\n' newlines)

    Returns:
        The destination path

    Raises:
        FileSystemError: If the directory cannot be created or written
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, temp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
                handle.write(text)
            os.replace(temp_name, path)
        except BaseException:
            Path(temp_name).unlink(missing_ok=True)
            raise
    except PermissionError as exc:
        raise FileSystemError(
            f"Permission denied writing to {path}: {exc}",
            context={"output_path": str(path)},
        )
    except OSError as exc:
        raise FileSystemError(
            f"Filesystem error writing {path}: {exc}",
            context={"output_path": str(path)},
        )
    return path


def frame_to_csv(frame: pd.DataFrame) -> str:
    """Render a DataFrame as CSV text with shortest round-trip float formatting."""
    return frame.to_csv(index=False, lineterminator="\n")


class OutputHandler:
    """Collects artifacts for one command and writes them in a single pass."""

    def __init__(self, logger: logging.Logger, output_dir: Path):
        """Initialize output handler.

        Args:
            logger: Logger instance for structured logging
            output_dir: Directory that relative artifact names resolve against
        """
        self.logger = logger
        self.output_dir = Path(output_dir)
        self._pending: List[Tuple[Path, str, Dict[str, Any]]] = []

    def resolve(self, name: Path) -> Path:
        name = Path(name)
        return name if name.is_absolute() else self.output_dir / name

    def check_writable(self) -> None:
        """Fail early when the output directory cannot be created or written.

        Raises:
            FileSystemError: If the directory is not writable
        """
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise FileSystemError(
                f"Cannot create output directory {self.output_dir}: {exc}",
                context={"output_dir": str(self.output_dir)},
            )
        if not os.access(self.output_dir, os.W_OK):
            raise FileSystemError(
                f"Output directory is not writable: {self.output_dir}",
                context={"output_dir": str(self.output_dir)},
            )

    def add_text(self, name: Path, text: str, **fields: Any) -> Path:
        path = self.resolve(name)
        self._pending.append((path, text, fields))
        return path

    def add_frame(self, name: Path, frame: pd.DataFrame) -> Path:
        return self.add_text(name, frame_to_csv(frame), rows=len(frame))

    def add_json(self, name: Path, payload: Any) -> Path:
        return self.add_text(name, json.dumps(payload, indent=2) + "\n")

    @property
    def pending(self) -> List[Path]:
        return [path for path, _, _ in self._pending]

    def flush(self, labels: Optional[Dict[str, Any]] = None) -> List[Path]:
        """Write every queued artifact and clear the queue.

        Args:
            labels: Extra log labels (e.g. the command name)

        Returns:
            Paths written, in queue order

        Raises:
            FileSystemError: If any artifact cannot be written
        """
        written = []
        for path, text, fields in self._pending:
            atomic_write_text(path, text)
            log_struct(
                self.logger,
                "INFO",
                f"Artifact saved: {path}",
                labels=labels,
                fields={
                    "file_path": str(path),
                    "file_size_bytes": path.stat().st_size,
                    **fields,
                },
            )
            written.append(path)
        self._pending = []
        return written
