"""Configuration support for the rethink-rm engine."""

import json
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any

from loguru import logger
from pydantic import ValidationError

from rethink_rm.errors import ConfigError, DataIOError
from rethink_rm.model import EngineConfig


def format_validation_error(error: ValidationError) -> list[str]:
    """
    Render a pydantic `ValidationError` as one "dotted.path: message" line per issue.

    Args:
        error: The error raised while building an `EngineConfig`.

    Returns:
        The issues, each prefixed with the offending key path.
    """
    lines = []
    for issue in error.errors():
        path = ".".join(str(part) for part in issue["loc"]) or "<root>"
        lines.append(f"{path}: {issue['msg']}")
    return lines


def _decode_value(text: str) -> Any:  # noqa: ANN401
    """Decode an override value as JSON, falling back to the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_override(assignment: str) -> tuple[list[str], Any]:
    """
    Split a `section.key=value` override into its key path and decoded value.

    Raises:
        ConfigError: If the assignment has no `=` or an empty key.
    """
    key, sep, value = assignment.partition("=")
    path = [part for part in key.strip().split(".") if part]
    if not sep or not path:
        msg = f"Overrides must look like section.key=value, got {assignment!r}."
        raise ConfigError(msg)
    return path, _decode_value(value)


def apply_overrides(data: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """
    Apply `section.key=value` overrides to raw config data.

    Intermediate sections are created as needed; flags win over file values.

    Args:
        data: Raw config data, as read from the JSON file.
        overrides: Assignments in `section.key=value` form.

    Returns:
        A new dictionary with the overrides applied.

    Raises:
        ConfigError: If an override walks through a non-object value.
    """
    result = json.loads(json.dumps(data))
    for assignment in overrides:
        path, value = parse_override(assignment)
        node = result
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                msg = f"Cannot override {'.'.join(path)}: {part} is not a section."
                raise ConfigError(msg)
            node = child
        node[path[-1]] = value
        logger.debug(
            "Config override {key} = {value}", key=".".join(path), value=value
        )
    return result


class Config:
    """Configuration class for the rethink-rm engine."""

    @staticmethod
    def build(data: Mapping[str, Any]) -> EngineConfig:
        """
        Validate raw config data into an `EngineConfig`.

        Args:
            data: Raw config data.

        Returns:
            EngineConfig: The validated configuration.

        Raises:
            ConfigError: If validation fails; the message lists every offending
              key path.
        """
        try:
            return EngineConfig.model_validate(dict(data))
        except ValidationError as e:
            msg = "Invalid configuration:\n" + "\n".join(format_validation_error(e))
            raise ConfigError(msg) from e

    @staticmethod
    def load_from_file(
        file_path: str | Path | None,
        overrides: Iterable[str] = (),
        *,
        seed: int | None = None,
        log_level: str | None = None,
    ) -> EngineConfig:
        """
        Load configuration from a file.

        Args:
            file_path: Path to the configuration file; `None` starts from defaults.
            overrides: `section.key=value` assignments applied after the file.
            seed: Optional replacement for the top-level `seed`.
            log_level: Optional replacement for the top-level `log_level`.

        Returns:
            EngineConfig: An instance of EngineConfig with the loaded configuration.

        Raises:
            DataIOError: If the file cannot be read.
            ConfigError: If the file is not valid JSON or fails validation.
        """
        config_data: dict[str, Any] = {}
        if file_path is not None:
            logger.info("Loading config from {path}", path=str(file_path))
            try:
                with Path(file_path).open("r", encoding="utf-8") as file:
                    config_data = json.load(file)
            except OSError as e:
                msg = f"Cannot read config file {file_path}: {e}"
                raise DataIOError(msg) from e
            except json.JSONDecodeError as e:
                msg = f"Config file {file_path} is not valid JSON: {e}"
                raise ConfigError(msg) from e
            if not isinstance(config_data, dict):
                msg = f"Config file {file_path} must hold a JSON object."
                raise ConfigError(msg)

        config_data = apply_overrides(config_data, overrides)
        if seed is not None:
            config_data["seed"] = seed
        if log_level is not None:
            config_data["log_level"] = log_level
        return Config.build(config_data)
