# -*- coding: utf-8 -*-
"""
GAN Workbench Core Utilities
Shared constants, configuration, logging, errors and file helpers.
"""

import hashlib
import json
import logging
import os
import threading
from typing import Any, Dict, Iterable, List, Optional

from dotenv import load_dotenv
from filelock import FileLock

load_dotenv()

# === CONSTANTS ===
EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

VARIANT_DCGAN = "DCGAN"
VARIANT_USE = "USE-GAN"
VARIANT_CMHSA = "CMHSA-GAN"
VARIANT_USE_CMHSA = "USE-CMHSA-GAN"
# Row order of the ablation table
VARIANT_ORDER = (VARIANT_DCGAN, VARIANT_USE, VARIANT_CMHSA, VARIANT_USE_CMHSA)

LOG_FORMAT = '%(asctime)s [%(levelname)s] %(message)s'


# === ERRORS ===
class WorkbenchError(Exception):
    """Root of every error raised by the workbench."""


class ShapeError(WorkbenchError, ValueError):
    """Shape, channel or divisibility mismatch."""


class NonFiniteError(WorkbenchError, ArithmeticError):
    """NaN or Inf produced where finite values are required."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        if self.diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
            message = f"{message} ({details})"
        super().__init__(message)


class AutodiffError(WorkbenchError):
    """Backward pass requested on something that cannot be differentiated."""


class ConfigValidationError(WorkbenchError, ValueError):
    """One or more configuration problems, all reported together."""

    def __init__(self, problems: Iterable[str]):
        self.problems = list(problems)
        lines = "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(f"{len(self.problems)} configuration problem(s):\n{lines}")


class CheckpointError(WorkbenchError):
    """Unreadable, corrupt or mismatched checkpoint file."""


class DatasetError(WorkbenchError):
    """Undecodable image or malformed manifest."""


class ExtractorError(WorkbenchError):
    """Unknown feature extractor or unusable activation data."""


class UnknownExtractorError(ExtractorError):
    """Requested extractor id is not registered."""

    def __init__(self, extractor_id: str, available: Iterable[str]):
        self.available = list(available)
        super().__init__(f"unknown extractor '{extractor_id}'; available extractors: {', '.join(self.available)}")


# === FILE UTILITIES ===
def ensure_directories_exist(*directories) -> None:
    """Create directories if they do not exist yet."""
    for directory in directories:
        os.makedirs(directory, exist_ok=True)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(payload: Any) -> str:
    """Key-sorted compact JSON, stable across runs."""
    return json.dumps(payload, sort_keys=True, separators=(',', ':'))


def atomic_write_bytes(path: str, data: bytes, timeout: Optional[float] = None) -> None:
    """
    Write a file atomically under a sibling lock file.

    Readers never observe a half-written file: the payload goes to a
    temporary file which is then renamed over the target.
    """
    directory = os.path.dirname(os.path.abspath(path))
    ensure_directories_exist(directory)
    tmp_path = f"{path}.tmp"
    with FileLock(f"{path}.lock", timeout=timeout or Config.LOCK_TIMEOUT):
        with open(tmp_path, 'wb') as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)


def atomic_write_text(path: str, text: str, timeout: Optional[float] = None) -> None:
    atomic_write_bytes(path, text.encode('utf-8'), timeout=timeout)


# === LOGGING ===
def setup_logging(log_file: Optional[str] = None, level: Optional[str] = None) -> None:
    """
    Configure the root logger with a console handler and an optional file handler.

    Calling it again with a new log file swaps the file handler, so every
    run directory gets its own log.
    """
    root = logging.getLogger()
    name = (level or Config.LOG_LEVEL).upper()
    # Unknown names fall back to INFO; Config.validate reports them
    root.setLevel(name if name in LOG_LEVELS else "INFO")
    formatter = logging.Formatter(LOG_FORMAT)

    if not any(getattr(h, '_workbench_console', False) for h in root.handlers):
        console = logging.StreamHandler()
        console.setFormatter(formatter)
        console._workbench_console = True
        root.addHandler(console)

    for handler in list(root.handlers):
        if getattr(handler, '_workbench_file', False):
            root.removeHandler(handler)
            handler.close()

    if log_file:
        ensure_directories_exist(os.path.dirname(os.path.abspath(log_file)))
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        file_handler._workbench_file = True
        root.addHandler(file_handler)


class SafeErrorLogger:
    """Thread-safe error logger."""

    def __init__(self, name: str = "workbench"):
        self._lock = threading.Lock()
        self.logger = logging.getLogger(name)

    def log_error(self, message: str, component: str, exception: Exception = None):
        """Log error message with thread safety."""
        with self._lock:
            full_message = f"[{component}] {message}"
            if exception:
                full_message += f" | Exception: {exception}"
            self.logger.error(full_message)


# === CONFIGURATION ===
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def read_env_number(name: str, default, cast, problems: List[str]):
    """Numeric environment setting; an unparsable value keeps the default and is reported in problems."""
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return cast(raw)
    except ValueError:
        kind = "an integer" if cast is int else "a number"
        problems.append(f"{name} must be {kind}, got '{raw}'")
        return default


_ENV_PROBLEMS: List[str] = []


class Config:
    """Centralized configuration management."""

    # Directories
    OUTPUT_ROOT = os.getenv("GAN_WORKBENCH_OUTPUT_ROOT", "")

    # Logging
    LOG_LEVEL = os.getenv("GAN_WORKBENCH_LOG_LEVEL", "INFO")

    # Intra-op threads; must stay fixed across runs for bit-identical results
    TORCH_THREADS = read_env_number("GAN_WORKBENCH_THREADS", 1, int, _ENV_PROBLEMS)

    # File locking
    LOCK_TIMEOUT = read_env_number("GAN_WORKBENCH_LOCK_TIMEOUT", 15.0, float, _ENV_PROBLEMS)

    # Parse failures from the settings above
    ENV_PROBLEMS = _ENV_PROBLEMS

    # Opt-in slow acceptance tests
    RUN_SLOW_TESTS = os.getenv("GAN_WORKBENCH_SLOW", "0") == "1"

    @classmethod
    def validate(cls) -> List[str]:
        """Return configuration problems (empty when valid)."""
        problems = list(cls.ENV_PROBLEMS)
        if cls.TORCH_THREADS < 1:
            problems.append("GAN_WORKBENCH_THREADS must be >= 1")
        if cls.LOCK_TIMEOUT <= 0:
            problems.append("GAN_WORKBENCH_LOCK_TIMEOUT must be positive")
        if cls.LOG_LEVEL.upper() not in LOG_LEVELS:
            problems.append(f"GAN_WORKBENCH_LOG_LEVEL '{cls.LOG_LEVEL}' is not a logging level")
        return problems

    @classmethod
    def resolve_output_dir(cls, output_dir: str) -> str:
        """Place relative output directories under the configured output root."""
        if cls.OUTPUT_ROOT and not os.path.isabs(output_dir):
            return os.path.join(cls.OUTPUT_ROOT, output_dir)
        return output_dir


# Export all components
__all__ = [
    'EXIT_OK', 'EXIT_VALIDATION', 'EXIT_RUNTIME',
    'VARIANT_DCGAN', 'VARIANT_USE', 'VARIANT_CMHSA', 'VARIANT_USE_CMHSA', 'VARIANT_ORDER',
    'WorkbenchError', 'ShapeError', 'NonFiniteError', 'AutodiffError',
    'ConfigValidationError', 'CheckpointError', 'DatasetError', 'ExtractorError', 'UnknownExtractorError',
    'ensure_directories_exist', 'sha256_bytes',
    'canonical_json', 'atomic_write_bytes', 'atomic_write_text',
    'setup_logging', 'SafeErrorLogger', 'Config', 'LOG_LEVELS', 'read_env_number',
]
