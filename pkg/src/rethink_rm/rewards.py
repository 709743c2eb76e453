"""
Reward computation for judgment traces.

All rewards are non-positive with 0 as best: the format term is 0 or
`lambda_format`, the outcome term is 0 or -1 (or a negative score distance
under the scaled variant) and only counts for well-formed traces.
"""

from enum import StrEnum

from rethink_rm.model import (
    ComparisonItem,
    DeliberationTrace,
    RewardBreakdown,
    RewardConfig,
    RewardVariant,
    Turn1Mode,
)
from rethink_rm.parsers import SCALED_MAX, SCALED_MIN

SCALED_WIN = 2


class Side(StrEnum):
    """Which end of a binary comparison a response is on."""

    WINNER = "winner"
    LOSER = "loser"


def format_reward(trace: DeliberationTrace, cfg: RewardConfig) -> float:
    """
    Compute the format term.

    Args:
        trace: The assembled trace.
        cfg: The reward constants.

    Returns:
        0 for a well-formed trace (and always under `no_format_check`),
        `cfg.lambda_format` otherwise.
    """
    if cfg.variant == RewardVariant.NO_FORMAT_CHECK or trace.well_formed:
        return 0.0
    return cfg.lambda_format


def _verdict_available(trace: DeliberationTrace, cfg: RewardConfig) -> bool:
    if cfg.variant == RewardVariant.NO_FORMAT_CHECK:
        return trace.verdict is not None
    return trace.well_formed


def outcome_reward(
    trace: DeliberationTrace, label: int, cfg: RewardConfig | None = None
) -> float:
    """
    Compute the binary outcome term.

    Without a format check the term is applied whenever a verdict could be
    extracted, since the structure is no longer enforced.

    Args:
        trace: The assembled trace.
        label: The gold label (1 or 2).
        cfg: The reward constants; defaults select the binary design.

    Returns:
        0 for a correct verdict, -1 for a wrong one, 0 when the term is skipped.
    """
    cfg = cfg or RewardConfig()
    if not _verdict_available(trace, cfg):
        return 0.0
    return 0.0 if trace.verdict == label else -1.0


def scaled_score_reward(predicted: int, truth: int) -> float:
    """
    Compute the negative distance between a predicted and a true score.

    Raises:
        ValueError: If either score lies outside -3..3.
    """
    for name, value in (("predicted", predicted), ("truth", truth)):
        if not SCALED_MIN <= value <= SCALED_MAX:
            msg = f"{name} score {value} is outside {SCALED_MIN}..{SCALED_MAX}."
            raise ValueError(msg)
    return -float(abs(predicted - truth))


def map_binary_to_scale(label: int, which: Side | str) -> int:
    """
    Map one side of a binary preference onto the -3..3 scale.

    The winner maps to +2 and the loser to -2; `label` does not change the
    mapping and is validated only.

    Raises:
        ValueError: If `label` is not 1 or 2.
    """
    if label not in (1, 2):
        msg = f"label must be 1 or 2, got {label}."
        raise ValueError(msg)
    return SCALED_WIN if Side(which) == Side.WINNER else -SCALED_WIN


def scaled_truth(item: ComparisonItem) -> int:
    """Return the true -3..3 score of response 1 for `item`."""
    if item.score_1 is not None:
        return item.score_1
    return map_binary_to_scale(
        item.label, Side.WINNER if item.label == 1 else Side.LOSER
    )


def composite_reward(
    trace: DeliberationTrace,
    label: int,
    cfg: RewardConfig,
    *,
    truth_score: int | None = None,
) -> RewardBreakdown:
    """
    Compute every reward term of a trace.

    Args:
        trace: The assembled trace.
        label: The gold label (1 or 2).
        cfg: The reward constants.
        truth_score: True -3..3 score of response 1, used by the scaled
          variant; defaults to the +/-2 mapping of `label`.

    Returns:
        The reward breakdown, with the per-turn rewards filled in.
    """
    fmt = format_reward(trace, cfg)

    if cfg.variant == RewardVariant.SCALED_SCORE:
        outcome = 0.0
        score = trace.rethink.score if trace.rethink is not None else None
        if trace.well_formed and score is not None:
            if truth_score is None:
                truth_score = map_binary_to_scale(
                    label, Side.WINNER if label == 1 else Side.LOSER
                )
            outcome = scaled_score_reward(score, truth_score)
    else:
        outcome = outcome_reward(trace, label, cfg)

    composite = fmt + cfg.w * outcome if fmt == 0 else fmt

    if cfg.turn1_mode == Turn1Mode.FORMAT_ONLY:
        branch_ok = (
            not trace.branch_violations
            or cfg.variant == RewardVariant.NO_FORMAT_CHECK
        )
        turn1 = 0.0 if branch_ok else cfg.lambda_format
    else:
        turn1 = composite

    return RewardBreakdown(
        format=fmt,
        outcome=outcome,
        composite=composite,
        turn1_reward=turn1,
        turn2_reward=composite,
    )
