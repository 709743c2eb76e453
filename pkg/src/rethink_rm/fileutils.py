"""Utility functions for writing run artifacts with their provenance."""

import csv
import json
from collections.abc import Iterable, Mapping, Sequence
from datetime import UTC, datetime
from pathlib import Path
from typing import Any

from loguru import logger

from rethink_rm import __version__
from rethink_rm.errors import DataIOError
from rethink_rm.model import EngineConfig

META_SUFFIX = ".meta.json"


def _sanitize_name(name: str) -> str:
    """
    Sanitize a name for usage as a filename.

    - strip surrounding whitespace and slashes
    - replace special characters
    """
    result = name.strip().strip("/")

    for c in ["/", ".", "_", " "]:
        result = result.replace(c, "-")

    return result


def _build_timestamp() -> str:
    """Build a string representation of the current UTC timestamp."""
    return datetime.now(tz=UTC).strftime("%Y-%m-%dT%H:%M:%SZ")


def build_artifact_path(
    out_dir: str | Path, name: str, extension: str, *, tag: str | None = None
) -> Path:
    """
    Build the path of a run artifact.

    The file name is a sanitized version of `name`, optionally followed by
    `tag`, with the `extension` provided.

    Args:
      out_dir: Directory the artifact goes to.
      name: Base name, e.g. the dataset stem.
      extension: The file extension to use.
      tag: Optional tag to append to the filename. Defaults to None.

    Returns:
        A `Path` object inside `out_dir`.
    """
    file_name = _sanitize_name(name)

    if tag:
        file_name = f"{file_name}.{tag}"

    # append the extension, stripping leading dot if present
    extension = extension.removeprefix(".")
    file_name = f"{file_name}.{extension}"

    logger.debug(
        "Building artifact path for {name} with tag {tag}: {file_name}",
        name=name,
        tag=tag,
        file_name=file_name,
    )
    return Path(out_dir) / file_name


def sidecar_path(path: str | Path) -> Path:
    """Return the `<file>.meta.json` sidecar path of a JSONL or CSV artifact."""
    path = Path(path)
    return path.with_name(path.name + META_SUFFIX)


def metadata_block() -> dict[str, str]:
    """Build the non-deterministic part of an artifact: engine version and time."""
    return {"engine_version": __version__, "created_at": _build_timestamp()}


def provenance(config: EngineConfig) -> dict[str, Any]:
    """Build the metadata block plus the resolved config echo."""
    return {"metadata": metadata_block(), "config": config.model_dump(mode="json")}


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        msg = f"Cannot write {path}: {e}"
        raise DataIOError(msg) from e


def _dumps(payload: Any) -> str:  # noqa: ANN401
    return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"


def write_json(
    path: str | Path, payload: Mapping[str, Any], config: EngineConfig
) -> Path:
    """
    Write a JSON artifact with its metadata block and config echo.

    Args:
      path: Destination file.
      payload: The artifact body; must not use the keys `metadata` or `config`.
      config: The resolved configuration of the run.

    Returns:
      The written path.
    """
    path = Path(path)
    _write_text(path, _dumps({**provenance(config), **payload}))
    logger.info("Wrote {path}", path=str(path))
    return path


def write_jsonl(
    path: str | Path, rows: Iterable[Mapping[str, Any]], config: EngineConfig
) -> Path:
    """Write a JSON-lines artifact plus its `.meta.json` sidecar."""
    path = Path(path)
    lines = [json.dumps(row, ensure_ascii=False) for row in rows]
    _write_text(path, "".join(f"{line}\n" for line in lines))
    _write_text(sidecar_path(path), _dumps(provenance(config)))
    logger.info("Wrote {n} lines to {path}", n=len(lines), path=str(path))
    return path


def write_csv(
    path: str | Path,
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
    config: EngineConfig,
) -> Path:
    """Write a CSV artifact plus its `.meta.json` sidecar."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as file:
            writer = csv.writer(file, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        msg = f"Cannot write {path}: {e}"
        raise DataIOError(msg) from e
    _write_text(sidecar_path(path), _dumps(provenance(config)))
    logger.info("Wrote {path}", path=str(path))
    return path
