"""Exceptions raised by the engine, and the process exit codes they map to."""

from enum import IntEnum


class ExitCode(IntEnum):
    """Process exit statuses used by the command-line app."""

    SUCCESS = 0
    DOMAIN_FAILURE = 1
    CONFIG_ERROR = 2
    IO_ERROR = 3
    BACKEND_ERROR = 4


class EngineError(Exception):
    """Base class for errors that should end a CLI run with a specific status."""

    exit_code: ExitCode = ExitCode.DOMAIN_FAILURE


class ConfigError(EngineError):
    """The engine configuration is invalid."""

    exit_code = ExitCode.CONFIG_ERROR


class DataIOError(EngineError):
    """An input file could not be read or an output file could not be written."""

    exit_code = ExitCode.IO_ERROR


class EmptyDatasetError(EngineError):
    """A dataset file contained no valid items."""


class BackendError(EngineError):
    """A generation backend returned an unusable response."""

    exit_code = ExitCode.BACKEND_ERROR


class BackendUnavailableError(BackendError):
    """A generation backend could not be reached after all retries."""


class TransientBackendError(BackendError):
    """A retryable transport failure (connection drop, timeout, 429, 5xx)."""
