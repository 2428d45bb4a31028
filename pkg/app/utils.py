"""
Utility functions for the phi4-lsi toolkit.
"""

import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
import structlog


def setup_logging(log_level: str = "INFO") -> None:
    """
    Setup structured logging configuration.

    Log records go to stderr; stdout and result files stay free of log output.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR)
    """
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            # JSON lines when piped, readable console output on a terminal
            structlog.dev.ConsoleRenderer() if sys.stderr.isatty() else structlog.processors.JSONRenderer()
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )

    logging.basicConfig(
        format="%(message)s",
        stream=sys.stderr,
        level=getattr(logging, log_level.upper(), logging.INFO)
    )


def format_error_response(error: Exception, details: Dict[str, Any] = None) -> Dict[str, Any]:
    """
    Format an error for the command-line error report.

    Args:
        error: Exception that occurred
        details: Additional error details

    Returns:
        Formatted error dictionary
    """
    response = {
        "error": type(error).__name__,
        "message": str(error)
    }

    if details:
        response["details"] = details

    return response


def sha256_hex(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def _json_safe(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return _json_safe(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    # Non-finite floats become strings; JSON has no literal for them.
    if isinstance(value, float) and not math.isfinite(value):
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def canonical_json(document: Any) -> bytes:
    """Deterministic JSON encoding (sorted keys, fixed indentation, trailing newline)."""
    return (json.dumps(_json_safe(document), sort_keys=True, indent=2, allow_nan=False) + "\n").encode("utf-8")


def table_to_csv(rows: List[Dict[str, Any]], columns: List[str], float_format: str = "%.17g") -> bytes:
    """Render rows as CSV with a fixed column order."""
    frame = pd.DataFrame(rows, columns=columns)
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, float_format=float_format, lineterminator="\n")
    return buffer.getvalue().encode("utf-8")


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


class StagedOutput:
    """
    Collects result files in memory and writes them only on commit.

    Each file is written to a temporary name in the target directory and
    renamed into place, so a failing pipeline leaves no partial outputs.
    """

    def __init__(self, directory: str):
        self.directory = Path(directory)
        self._files: Dict[str, bytes] = {}

    def add_bytes(self, name: str, payload: bytes) -> None:
        self._files[name] = payload

    def add_json(self, name: str, document: Any) -> None:
        self.add_bytes(name, canonical_json(document))

    def add_table(self, name: str, rows: List[Dict[str, Any]], columns: List[str], float_format: str = "%.17g") -> None:
        self.add_bytes(name, table_to_csv(rows, columns, float_format))

    @property
    def names(self) -> List[str]:
        return sorted(self._files)

    def manifest(self, resolved_config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """File digests plus one digest over configuration and files."""
        files = {name: sha256_hex(self._files[name]) for name in self.names}
        overall = hashlib.sha256()
        if resolved_config is not None:
            overall.update(canonical_json(resolved_config))
        for name in self.names:
            overall.update(name.encode("utf-8"))
            overall.update(files[name].encode("ascii"))
        return {"files": files, "digest": overall.hexdigest()}

    def commit(self, resolved_config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """
        Write every staged file plus ``resolved_config.json`` and ``manifest.json``.

        Returns:
            The manifest that was written
        """
        if resolved_config is not None:
            self.add_json("resolved_config.json", resolved_config)
        manifest = self.manifest(resolved_config)
        for name in self.names:
            _atomic_write(self.directory / name, self._files[name])
        _atomic_write(self.directory / "manifest.json", canonical_json(manifest))
        return manifest
