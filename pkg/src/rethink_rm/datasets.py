"""Loading of line-delimited JSON preference datasets."""

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from loguru import logger
from pydantic import ValidationError

from rethink_rm.config import format_validation_error
from rethink_rm.errors import DataIOError, EmptyDatasetError
from rethink_rm.model import ComparisonItem


@dataclass(frozen=True)
class RejectedLine:
    """
    A dataset line that could not be turned into a `ComparisonItem`.

    Attributes:
        source: File the line came from.
        line_number: 1-based line number.
        reason: Why the line was rejected.
    """

    source: str
    line_number: int
    reason: str


@dataclass
class LoadedDataset:
    """Items read from one or more files, plus every rejected line."""

    items: list[ComparisonItem] = field(default_factory=list)
    rejects: list[RejectedLine] = field(default_factory=list)

    @property
    def pairwise(self) -> list[ComparisonItem]:
        """Items without Best-of-N candidates."""
        return [item for item in self.items if item.candidates is None]

    @property
    def best_of_n(self) -> list[ComparisonItem]:
        """Items with Best-of-N candidates."""
        return [item for item in self.items if item.candidates is not None]


def _read_lines(path: Path) -> list[bytes]:
    try:
        return path.read_bytes().splitlines()
    except OSError as e:
        msg = f"Cannot read dataset {path}: {e}"
        raise DataIOError(msg) from e


def _parse_lines(
    lines: Iterable[bytes], source: str, *, tag_source: bool
) -> LoadedDataset:
    loaded = LoadedDataset()
    for line_number, raw in enumerate(lines, start=1):
        try:
            line = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            loaded.rejects.append(
                RejectedLine(source, line_number, f"invalid UTF-8: {e}")
            )
            continue
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            loaded.rejects.append(
                RejectedLine(source, line_number, f"invalid JSON: {e}")
            )
            continue
        if not isinstance(data, dict):
            loaded.rejects.append(
                RejectedLine(source, line_number, "line is not a JSON object")
            )
            continue
        if tag_source:
            data["source"] = source
        try:
            loaded.items.append(ComparisonItem.model_validate(data))
        except ValidationError as e:
            reason = "; ".join(format_validation_error(e))
            loaded.rejects.append(RejectedLine(source, line_number, reason))
    return loaded


def _log_rejects(rejects: Sequence[RejectedLine]) -> None:
    for reject in rejects:
        logger.warning(
            "Rejected {source}:{line}: {reason}",
            source=reject.source,
            line=reject.line_number,
            reason=reject.reason,
        )


def load_dataset(path: str | Path, *, tag_source: bool = False) -> LoadedDataset:
    """
    Load a line-delimited JSON dataset.

    Labels may be 1/2 or "A"/"B". Lines that fail to parse are collected as
    rejects with their line numbers; blank lines are skipped.

    Args:
        path: The dataset file.
        tag_source: Set each item's `source` to the file stem.

    Returns:
        The items and rejects.

    Raises:
        DataIOError: If the file cannot be read.
        EmptyDatasetError: If no line yields a valid item.
    """
    path = Path(path)
    loaded = _parse_lines(_read_lines(path), path.stem, tag_source=tag_source)
    _log_rejects(loaded.rejects)
    if not loaded.items:
        rejected = len(loaded.rejects)
        msg = f"Dataset {path} contains no valid items ({rejected} rejected)."
        raise EmptyDatasetError(msg)
    logger.info(
        "Loaded {n} items from {path} ({rejected} rejected)",
        n=len(loaded.items),
        path=str(path),
        rejected=len(loaded.rejects),
    )
    return loaded


def load_mixture(
    paths: Sequence[str | Path], exclude: Iterable[str] = ()
) -> LoadedDataset:
    """
    Load several datasets as one mixture, tagging each item with its source.

    Args:
        paths: Dataset files, concatenated in order.
        exclude: Source names (file stems) to leave out.

    Returns:
        The concatenated items and merged rejects.

    Raises:
        EmptyDatasetError: If nothing remains after exclusion.
    """
    excluded = set(exclude)
    mixture = LoadedDataset()
    for path in map(Path, paths):
        if path.stem in excluded:
            logger.info("Leaving out source {source}", source=path.stem)
            continue
        loaded = _parse_lines(_read_lines(path), path.stem, tag_source=True)
        mixture.items.extend(loaded.items)
        mixture.rejects.extend(loaded.rejects)

    _log_rejects(mixture.rejects)
    if not mixture.items:
        msg = "The dataset mixture contains no valid items."
        raise EmptyDatasetError(msg)
    logger.info(
        "Loaded a mixture of {n} items from {k} sources",
        n=len(mixture.items),
        k=len({item.source for item in mixture.items}),
    )
    return mixture
