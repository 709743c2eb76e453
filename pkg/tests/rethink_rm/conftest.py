# ruff: noqa: D100, D103
import pytest

from rethink_rm.criteria import CriteriaSet
from rethink_rm.model import ComparisonItem, EngineConfig
from rethink_rm.parsers import (
    assemble_trace,
    format_branch_turn,
    format_rethink_turn,
    parse_branch,
    parse_rethink,
)
from tests.rethink_rm.mocks import GOLD_MARKER


def make_item(  # noqa: PLR0913
    item_id: str,
    label: int,
    *,
    domain: str | None = None,
    difficulty: str | None = None,
    source: str | None = None,
) -> ComparisonItem:
    """Build a pairwise item whose gold response carries the gold marker."""
    responses = ["A plain answer.", "Another plain answer."]
    responses[label - 1] = f"The better answer. {GOLD_MARKER}"
    return ComparisonItem(
        id=item_id,
        prompt=f"Question {item_id}?",
        response_1=responses[0],
        response_2=responses[1],
        label=label,
        domain=domain,
        difficulty=difficulty,
        source=source,
    )


def make_bon_item(item_id: str, n: int, gold: int) -> ComparisonItem:
    """Build a Best-of-N item whose gold candidate carries the gold marker."""
    candidates = [f"Candidate {index}." for index in range(1, n + 1)]
    candidates[gold - 1] = f"Candidate {gold}. {GOLD_MARKER}"
    return ComparisonItem(
        id=item_id, prompt="Pick one.", candidates=candidates, label=gold
    )


@pytest.fixture
def config() -> EngineConfig:
    return EngineConfig.model_validate(
        {"backend": {"max_retries": 2, "retry_backoff_s": 0.0}}
    )


@pytest.fixture
def criteria() -> CriteriaSet:
    return CriteriaSet.default()


@pytest.fixture
def branch_text() -> str:
    return format_branch_turn(
        ["Logical Reasoning", "Computational Precision"],
        "Step two divides by zero.",
        "All steps check out.",
    )


@pytest.fixture
def correct_trace(criteria: CriteriaSet, branch_text: str):  # noqa: ANN201
    return assemble_trace(
        parse_branch(branch_text, criteria),
        parse_rethink(format_rethink_turn("Response 2 is sound.", 2)),
    )


@pytest.fixture
def wrong_trace(criteria: CriteriaSet, branch_text: str):  # noqa: ANN201
    return assemble_trace(
        parse_branch(branch_text, criteria),
        parse_rethink(format_rethink_turn("Response 1 is sound.", 1)),
    )


@pytest.fixture
def malformed_trace(criteria: CriteriaSet):  # noqa: ANN201
    branch = format_branch_turn(
        [
            "Logical Reasoning",
            "Computational Precision",
            "Writing Clarity",
            "Content Relevance",
        ],
        "Too many dimensions.",
        "Still too many.",
    )
    return assemble_trace(
        parse_branch(branch, criteria),
        parse_rethink(format_rethink_turn("Response 2 is sound.", 2)),
    )
