"""Two-turn GRPO training of the toy judge policy."""

from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import numpy as np
from loguru import logger

from rethink_rm.backends import ToyBackend
from rethink_rm.grpo import TokenBatch, apply_update, assign_advantages, grpo_loss_terms
from rethink_rm.model import (
    EngineConfig,
    GroupSample,
    GrpoConfig,
    PipelineMode,
    RewardConfig,
)
from rethink_rm.orchestrator import RolloutOrchestrator
from rethink_rm.toy import PolicyEvaluation, ToyEnvironment, ToyPolicy, evaluate_policy

HELDOUT_PREFIX = "heldout"
TRAIN_PREFIX = "train"


@dataclass(frozen=True)
class StepRecord:
    """
    Metrics of one training step.

    Attributes:
        step: 1-based step number.
        loss: Loss of the last update made in the step.
        mean_reward: Mean terminal reward of the sampled rollouts.
        accuracy: Fraction of sampled rollouts that are well-formed and correct.
        format_violation_rate: Fraction of sampled rollouts that are malformed.
        buffer_records: Records added to the update buffer.
        kl: Mean per-trace KL to the reference after the step's last update.
        clip_fraction: Fraction of clipped tokens in the step's last update.
        heldout_accuracy: Held-out greedy accuracy, on evaluation steps.
        heldout_format_violation_rate: Held-out violation probability, on
          evaluation steps.
    """

    step: int
    loss: float
    mean_reward: float
    accuracy: float
    format_violation_rate: float
    buffer_records: int
    kl: float
    clip_fraction: float
    heldout_accuracy: float | None = None
    heldout_format_violation_rate: float | None = None

    def to_json(self) -> dict[str, float | int | None]:
        """Return the record as a JSON-ready dictionary."""
        return asdict(self)


@dataclass
class TrainingHistory:
    """Per-step metrics plus held-out evaluations before and after training."""

    steps: list[StepRecord] = field(default_factory=list)
    initial: PolicyEvaluation | None = None
    final: PolicyEvaluation | None = None


def _batch_metrics(groups: list[GroupSample]) -> tuple[float, float, float, int]:
    rollouts = [rollout for group in groups for rollout in group.rollouts]
    rewards = [rollout.rewards.composite for rollout in rollouts]
    correct = [
        rollout.trace.well_formed and rollout.trace.verdict == rollout.label
        for rollout in rollouts
    ]
    malformed = [not rollout.trace.well_formed for rollout in rollouts]
    records = sum(len(rollout.records) for rollout in rollouts)
    return (
        float(np.mean(rewards)),
        float(np.mean(correct)),
        float(np.mean(malformed)),
        records,
    )


def train_loop(
    env: ToyEnvironment,
    policy: ToyPolicy,
    reward_cfg: RewardConfig,
    grpo_cfg: GrpoConfig,
    *,
    engine_config: EngineConfig | None = None,
    on_step: Callable[[StepRecord], None] | None = None,
) -> TrainingHistory:
    """
    Train `policy` with two-turn GRPO on synthetic comparisons.

    Each step samples `batch_items` fresh items, runs K two-turn rollouts per
    item through the toy backend, whitens each group's per-turn rewards, and
    makes `updates_per_step` clipped updates against the sampling-time
    log-probabilities. `policy` is updated in place.

    Args:
        env: The synthetic environment.
        policy: The policy to train.
        reward_cfg: Reward constants.
        grpo_cfg: GRPO configuration.
        engine_config: Remaining configuration (criteria, rollout settings,
          seed); defaults are used when omitted.
        on_step: Called with each step's record.

    Returns:
        The training history.
    """
    base = engine_config or EngineConfig()
    config = base.model_copy(
        update={
            "reward": reward_cfg,
            "grpo": grpo_cfg,
            "rollout": base.rollout.model_copy(
                update={"mode": PipelineMode.TWO_TURN_FULL}
            ),
        }
    )
    backend = ToyBackend(config, env=env, policy=policy)
    orchestrator = RolloutOrchestrator(config, backend)
    heldout = env.sample_items(grpo_cfg.eval_items, HELDOUT_PREFIX)

    history = TrainingHistory(initial=evaluate_policy(env, policy, heldout))
    logger.info(
        "Training for {steps} steps (K={k}, {items} items per step); "
        "held-out accuracy {accuracy:.3f}, violation rate {rate:.3f}",
        steps=grpo_cfg.steps,
        k=grpo_cfg.group_size,
        items=grpo_cfg.batch_items,
        accuracy=history.initial.accuracy,
        rate=history.initial.format_violation_rate,
    )

    for step in range(1, grpo_cfg.steps + 1):
        items = env.sample_items(grpo_cfg.batch_items, f"{TRAIN_PREFIX}-{step}")
        groups = orchestrator.rollout_batch(
            items, grpo_cfg.group_size, round_index=step
        )
        mean_reward, accuracy, violation_rate, buffer_records = _batch_metrics(groups)

        whitened = [assign_advantages(group, grpo_cfg) for group in groups]
        batch = TokenBatch.from_groups(whitened)
        for _ in range(grpo_cfg.updates_per_step):
            terms, grad = grpo_loss_terms(batch, policy, grpo_cfg)
            apply_update(policy, grad, grpo_cfg)

        heldout_eval = None
        if grpo_cfg.eval_every and (
            step % grpo_cfg.eval_every == 0 or step == grpo_cfg.steps
        ):
            heldout_eval = evaluate_policy(env, policy, heldout)

        record = StepRecord(
            step=step,
            loss=terms.loss,
            mean_reward=mean_reward,
            accuracy=accuracy,
            format_violation_rate=violation_rate,
            buffer_records=buffer_records,
            kl=terms.kl,
            clip_fraction=terms.clip_fraction,
            heldout_accuracy=heldout_eval.accuracy if heldout_eval else None,
            heldout_format_violation_rate=(
                heldout_eval.format_violation_rate if heldout_eval else None
            ),
        )
        history.steps.append(record)
        logger.debug(
            "Step {step}: loss {loss:.4f}, reward {reward:.2f}, "
            "accuracy {accuracy:.3f}, violations {violations:.3f}",
            step=step,
            loss=record.loss,
            reward=mean_reward,
            accuracy=accuracy,
            violations=violation_rate,
        )
        if on_step is not None:
            on_step(record)

    history.final = evaluate_policy(env, policy, heldout)
    logger.info(
        "Training done: held-out accuracy {accuracy:.3f}, violation rate {rate:.4f}",
        accuracy=history.final.accuracy,
        rate=history.final.format_violation_rate,
    )
    return history
