"""Preference-accuracy evaluation with swap-order control, and Best-of-N selection."""

from collections import defaultdict
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any

from loguru import logger

from rethink_rm.errors import BackendError
from rethink_rm.model import ComparisonItem, EvalConfig, PipelineMode, SwapControl
from rethink_rm.orchestrator import RolloutOrchestrator

GROUP_KEYS = ("domain", "difficulty", "source")
ORIGINAL = "original"
SWAPPED = "swapped"


@dataclass(frozen=True)
class Judgment:
    """
    One judgment of an item in one presentation order.

    Attributes:
        order: "original" or "swapped".
        choice: The chosen response in the item's original numbering, `None`
          for a malformed trace.
        violations: Violation codes of the trace.
    """

    order: str
    choice: int | None
    violations: tuple[str, ...] = ()


@dataclass(frozen=True)
class ItemVerdict:
    """
    The evaluation outcome of one item.

    Attributes:
        item_id: The item.
        label: Its gold label.
        domain: Domain tag, if any.
        difficulty: Difficulty tag, if any.
        source: Source tag, if any.
        judgments: Its judgments, original order first.
        correct: Whether every judgment picked the gold response; `None` when
          the item errored.
        consistent: Whether both orders agreed; `None` without swap control or
          when errored.
        error: Backend failure message for errored items.
    """

    item_id: str
    label: int
    domain: str | None
    difficulty: str | None
    source: str | None
    judgments: tuple[Judgment, ...] = ()
    correct: bool | None = None
    consistent: bool | None = None
    error: str | None = None

    @property
    def errored(self) -> bool:
        """Whether a backend failure kept this item from being judged."""
        return self.error is not None

    def tag(self, key: str) -> str | None:
        """Return the item's value for a group key."""
        return getattr(self, key)


@dataclass(frozen=True)
class GroupAccuracy:
    """Accuracy of one group of items."""

    accuracy: float
    count: int


@dataclass
class EvalReport:
    """
    Aggregated pairwise evaluation results.

    Attributes:
        overall_accuracy: Fraction of judged items counted correct.
        single_pass_accuracy: Fraction of judged items whose original-order
          judgment is correct.
        per_domain: Accuracy per domain tag.
        per_difficulty: Accuracy per difficulty tag.
        per_source: Accuracy per dataset source.
        swap_consistency: Fraction of judged items whose two orders agree;
          `None` without swap control.
        malformed_rate: Fraction of judgments with a malformed trace.
        n_items: Items submitted.
        n_correct: Items counted correct.
        n_incorrect: Items counted incorrect.
        n_errored: Items excluded because of backend failures.
        items: Per-item outcomes, in input order.
    """

    overall_accuracy: float
    single_pass_accuracy: float
    per_domain: dict[str, GroupAccuracy]
    per_difficulty: dict[str, GroupAccuracy]
    per_source: dict[str, GroupAccuracy]
    swap_consistency: float | None
    malformed_rate: float
    n_items: int
    n_correct: int
    n_incorrect: int
    n_errored: int
    items: list[ItemVerdict] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        """Return the report as a JSON-ready dictionary."""
        return asdict(self)


def _fraction(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator else 0.0


def aggregate(
    report: EvalReport | Sequence[ItemVerdict], group_key: str
) -> dict[str, GroupAccuracy]:
    """
    Compute accuracy per group of items.

    Errored items and items without the tag are left out; groups with no items
    are not reported.

    Args:
        report: A report, or its per-item outcomes.
        group_key: One of "domain", "difficulty" or "source".

    Returns:
        Accuracy and count per group, sorted by group name.

    Raises:
        ValueError: If `group_key` is not a known tag.
    """
    if group_key not in GROUP_KEYS:
        msg = f"Unknown group key {group_key!r}; expected one of {GROUP_KEYS}."
        raise ValueError(msg)
    items = report.items if isinstance(report, EvalReport) else report

    tallies: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    for item in items:
        value = item.tag(group_key)
        if item.errored or value is None:
            continue
        tallies[value][0] += int(bool(item.correct))
        tallies[value][1] += 1
    return {
        name: GroupAccuracy(accuracy=correct / count, count=count)
        for name, (correct, count) in sorted(tallies.items())
    }


def _judge(
    orchestrator: RolloutOrchestrator,
    item: ComparisonItem,
    order: str,
    mode: PipelineMode | None,
) -> Judgment:
    presented = item if order == ORIGINAL else item.swapped()
    rollout = orchestrator.rollout_two_turn(presented, mode=mode, tag=order)
    verdict = rollout.trace.verdict if rollout.trace.well_formed else None
    if verdict is not None and order == SWAPPED:
        verdict = 3 - verdict
    return Judgment(
        order=order,
        choice=verdict,
        violations=tuple(v.code.value for v in rollout.trace.violations),
    )


def _run_items[T](
    items: Sequence[ComparisonItem],
    work: Callable[[ComparisonItem], T],
    cfg: EvalConfig,
    on_error: Callable[[ComparisonItem, BackendError], T],
) -> list[T]:
    def guarded(item: ComparisonItem) -> T:
        try:
            return work(item)
        except BackendError as e:
            if cfg.strict:
                raise
            logger.warning(
                "Excluding item {item_id} after a backend failure: {error}",
                item_id=item.id,
                error=str(e),
            )
            return on_error(item, e)

    with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
        return list(pool.map(guarded, items))


def evaluate_pairwise(
    items: Sequence[ComparisonItem],
    orchestrator: RolloutOrchestrator,
    cfg: EvalConfig,
) -> EvalReport:
    """
    Judge pairwise items and score preference accuracy.

    With `both_orders` swap control an item counts correct only when both
    presentation orders pick the gold response. Malformed traces count as
    incorrect.

    Args:
        items: Pairwise items.
        orchestrator: The judgment pipeline.
        cfg: Evaluation settings.

    Returns:
        The evaluation report.

    Raises:
        ValueError: If `items` is empty or holds Best-of-N items.
        BackendError: On backend failures when `cfg.strict` is set.
    """
    if not items:
        msg = "evaluate_pairwise needs at least one item."
        raise ValueError(msg)
    if any(item.candidates is not None for item in items):
        msg = "Best-of-N items must go through evaluate_bon."
        raise ValueError(msg)

    both = cfg.swap_control == SwapControl.BOTH_ORDERS
    orders = (ORIGINAL, SWAPPED) if both else (ORIGINAL,)
    if not both:
        logger.debug(
            "Swap consistency skipped: swap control is {swap}", swap=cfg.swap_control
        )

    def base(item: ComparisonItem) -> dict[str, Any]:
        return {
            "item_id": item.id,
            "label": item.label,
            "domain": item.domain,
            "difficulty": item.difficulty.value if item.difficulty else None,
            "source": item.source,
        }

    def work(item: ComparisonItem) -> ItemVerdict:
        judgments = tuple(
            _judge(orchestrator, item, order, cfg.mode) for order in orders
        )
        choices = [j.choice for j in judgments]
        consistent = (
            choices[0] is not None and choices[0] == choices[1]
            if len(judgments) > 1
            else None
        )
        return ItemVerdict(
            **base(item),
            judgments=judgments,
            correct=all(choice == item.label for choice in choices),
            consistent=consistent,
        )

    def on_error(item: ComparisonItem, error: BackendError) -> ItemVerdict:
        return ItemVerdict(**base(item), error=str(error))

    logger.info(
        "Evaluating {n} items with swap control {swap}",
        n=len(items),
        swap=cfg.swap_control,
    )
    verdicts = _run_items(items, work, cfg, on_error)

    judged = [v for v in verdicts if not v.errored]
    n_correct = sum(bool(v.correct) for v in judged)
    judgments = [j for v in judged for j in v.judgments]
    report = EvalReport(
        overall_accuracy=_fraction(n_correct, len(judged)),
        single_pass_accuracy=_fraction(
            sum(v.judgments[0].choice == v.label for v in judged), len(judged)
        ),
        per_domain=aggregate(verdicts, "domain"),
        per_difficulty=aggregate(verdicts, "difficulty"),
        per_source=aggregate(verdicts, "source"),
        swap_consistency=(
            _fraction(sum(bool(v.consistent) for v in judged), len(judged))
            if len(orders) > 1
            else None
        ),
        malformed_rate=_fraction(
            sum(j.choice is None for j in judgments), len(judgments)
        ),
        n_items=len(verdicts),
        n_correct=n_correct,
        n_incorrect=len(judged) - n_correct,
        n_errored=len(verdicts) - len(judged),
        items=verdicts,
    )
    logger.info(
        "Accuracy {accuracy:.4f} over {n} judged items ({errored} errored)",
        accuracy=report.overall_accuracy,
        n=len(judged),
        errored=report.n_errored,
    )
    return report


@dataclass(frozen=True)
class BonVerdict:
    """
    The Best-of-N outcome of one item.

    Attributes:
        item_id: The item.
        label: Index of the gold winner (1-based).
        champion: Index of the final champion; `None` when a match was malformed
          or the item errored.
        comparisons: Pairwise judgments made.
        malformed: Whether a match produced a malformed trace.
        error: Backend failure message for errored items.
    """

    item_id: str
    label: int
    champion: int | None
    comparisons: int
    malformed: bool = False
    error: str | None = None


@dataclass
class BonReport:
    """Best-of-N selection accuracy."""

    accuracy: float
    n_items: int
    n_correct: int
    n_errored: int
    malformed_rate: float
    items: list[BonVerdict] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        """Return the report as a JSON-ready dictionary."""
        return asdict(self)


def evaluate_bon(
    items: Sequence[ComparisonItem],
    orchestrator: RolloutOrchestrator,
    cfg: EvalConfig,
) -> BonReport:
    """
    Pick the best candidate of each item by a sequential champion tournament.

    The champion starts as candidate 1 and meets each later candidate in index
    order, presented first. A malformed match ends the item as incorrect.

    Args:
        items: Items with at least two candidates each.
        orchestrator: The judgment pipeline.
        cfg: Evaluation settings.

    Returns:
        The Best-of-N report.

    Raises:
        ValueError: If `items` is empty or an item has no candidates.
        BackendError: On backend failures when `cfg.strict` is set.
    """
    if not items:
        msg = "evaluate_bon needs at least one item."
        raise ValueError(msg)
    for item in items:
        if item.candidates is None:
            msg = f"Item {item.id} has no candidates."
            raise ValueError(msg)

    def work(item: ComparisonItem) -> BonVerdict:
        candidates = item.candidates or ()
        champion = 1
        comparisons = 0
        for challenger in range(2, len(candidates) + 1):
            rollout = orchestrator.rollout_two_turn(
                item.pair(champion, challenger), mode=cfg.mode, tag=ORIGINAL
            )
            comparisons += 1
            if not rollout.trace.well_formed or rollout.trace.verdict is None:
                return BonVerdict(
                    item_id=item.id,
                    label=item.label,
                    champion=None,
                    comparisons=comparisons,
                    malformed=True,
                )
            if rollout.trace.verdict == 2:  # noqa: PLR2004
                champion = challenger
        return BonVerdict(
            item_id=item.id,
            label=item.label,
            champion=champion,
            comparisons=comparisons,
        )

    def on_error(item: ComparisonItem, error: BackendError) -> BonVerdict:
        return BonVerdict(
            item_id=item.id,
            label=item.label,
            champion=None,
            comparisons=0,
            error=str(error),
        )

    verdicts = _run_items(items, work, cfg, on_error)
    judged = [v for v in verdicts if v.error is None]
    n_correct = sum(v.champion == v.label for v in judged)
    report = BonReport(
        accuracy=_fraction(n_correct, len(judged)),
        n_items=len(verdicts),
        n_correct=n_correct,
        n_errored=len(verdicts) - len(judged),
        malformed_rate=_fraction(sum(v.malformed for v in judged), len(judged)),
        items=verdicts,
    )
    logger.info(
        "Best-of-N accuracy {accuracy:.4f} over {n} items",
        accuracy=report.accuracy,
        n=len(judged),
    )
    return report
