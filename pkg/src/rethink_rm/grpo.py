"""
The GRPO objective: whitened group advantages, token-level ratios against the
sampling-time policy, an asymmetric clipped surrogate and an exact KL penalty
to the frozen reference policy, with analytic gradients for `ToyPolicy`.
"""

from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np

from rethink_rm.model import GroupSample, GrpoConfig, Turn
from rethink_rm.toy import N_STEPS, VOCAB_SIZE, ToyPolicy


def group_advantages(
    rewards: Sequence[float] | np.ndarray, std_epsilon: float = 1e-8
) -> np.ndarray:
    """
    Whiten one group of rewards.

    Args:
        rewards: The K terminal rewards of a group.
        std_epsilon: Added to the population standard deviation.

    Returns:
        `(r - mean) / (std + std_epsilon)`; all zeros when every reward is equal.

    Raises:
        ValueError: If the group has fewer than two rewards.
    """
    values = np.asarray(rewards, dtype=float)
    if values.ndim != 1 or values.size < 2:  # noqa: PLR2004
        msg = f"A group needs at least 2 rewards, got {values.size}."
        raise ValueError(msg)
    if np.ptp(values) == 0:
        return np.zeros_like(values)
    return (values - values.mean()) / (values.std() + std_epsilon)


def probability_ratio(
    logp_current: Sequence[float] | np.ndarray,
    logp_reference: Sequence[float] | np.ndarray,
) -> np.ndarray:
    """
    Compute per-token probability ratios from log-probabilities.

    Raises:
        ValueError: If the two sequences differ in length.
    """
    current = np.asarray(logp_current, dtype=float)
    reference = np.asarray(logp_reference, dtype=float)
    if current.shape != reference.shape:
        msg = f"Length mismatch: {current.shape} vs {reference.shape}."
        raise ValueError(msg)
    return np.exp(current - reference)


def clipped_surrogate(ratio: float, advantage: float, cfg: GrpoConfig) -> float:
    """Return `min(ratio * A, clip(ratio, 1 - clip_low, 1 + clip_high) * A)`."""
    clipped = min(max(ratio, 1.0 - cfg.clip_low), 1.0 + cfg.clip_high)
    return min(ratio * advantage, clipped * advantage)


def categorical_kl(
    p: Sequence[float] | np.ndarray, q: Sequence[float] | np.ndarray
) -> float:
    """Exact KL(p || q) of two categorical distributions (natural log)."""
    p_arr = np.asarray(p, dtype=float)
    q_arr = np.asarray(q, dtype=float)
    support = p_arr > 0
    return float(np.sum(p_arr[support] * np.log(p_arr[support] / q_arr[support])))


def kl_penalty(
    policy: ToyPolicy, traces: Sequence[Sequence[tuple[int, np.ndarray]]]
) -> float:
    """
    Exact KL of the policy to its reference, summed per trace and averaged.

    Args:
        policy: The policy (carrying its frozen reference).
        traces: For each trace, its `(step, context)` positions.

    Returns:
        The mean over traces of the summed per-step KL divergences.
    """
    if not traces:
        msg = "kl_penalty needs at least one trace."
        raise ValueError(msg)
    total = 0.0
    for trace in traces:
        for step, context in trace:
            total += categorical_kl(
                policy.probabilities(step, context),
                policy.reference_probabilities(step, context),
            )
    return total / len(traces)


def assign_advantages(group: GroupSample, cfg: GrpoConfig) -> GroupSample:
    """
    Whiten a group's per-turn rewards and attach the advantages to its records.

    Turn-1 and turn-2 records are whitened as one pool unless
    `cfg.whiten_turns_separately` is set.

    Args:
        group: The group, with rewards attached to its records.
        cfg: GRPO configuration.

    Returns:
        A copy of `group` whose records carry advantages; `advantages` holds
        the advantage of each rollout's final record.
    """
    records = [record for rollout in group.rollouts for record in rollout.records]
    advantages = np.zeros(len(records))
    if cfg.whiten_turns_separately:
        for turn in Turn:
            index = [i for i, record in enumerate(records) if record.turn == turn]
            if index:
                advantages[index] = group_advantages(
                    [records[i].reward for i in index], cfg.std_epsilon
                )
    else:
        advantages = group_advantages(
            [record.reward for record in records], cfg.std_epsilon
        )

    cursor = 0
    rollouts = []
    for rollout in group.rollouts:
        updated = []
        for record in rollout.records:
            updated.append(replace(record, advantage=float(advantages[cursor])))
            cursor += 1
        rollouts.append(replace(rollout, records=tuple(updated)))

    return replace(
        group,
        rollouts=tuple(rollouts),
        advantages=tuple(
            rollout.records[-1].advantage or 0.0 for rollout in rollouts
        ),
    )


@dataclass(frozen=True, eq=False)
class TokenBatch:
    """
    The tokens of a set of groups, flattened for the loss.

    Attributes:
        steps: Step position of each token.
        contexts: Context vector of each token.
        actions: Sampled action of each token.
        logp_behavior: Log-probability at sampling time.
        advantages: Advantage of the record each token belongs to.
        trace_index: Which rollout each token belongs to.
        n_traces: Number of rollouts.
    """

    steps: np.ndarray
    contexts: np.ndarray
    actions: np.ndarray
    logp_behavior: np.ndarray
    advantages: np.ndarray
    trace_index: np.ndarray
    n_traces: int

    @classmethod
    def from_groups(cls, groups: Sequence[GroupSample]) -> "TokenBatch":
        """
        Flatten whitened groups into a `TokenBatch`.

        Raises:
            ValueError: If there are no groups, a group is empty, a record has
              no advantage, or no record carries token-level data.
        """
        if not groups:
            msg = "grpo_loss needs at least one group."
            raise ValueError(msg)

        steps, contexts, actions, logp, advantages, trace_index = [], [], [], [], [], []
        n_traces = 0
        for group in groups:
            if not group.rollouts:
                msg = f"Group {group.item_id} has no rollouts."
                raise ValueError(msg)
            for rollout in group.rollouts:
                for record in rollout.records:
                    if record.advantage is None:
                        msg = f"Record of {record.item_id} has no advantage yet."
                        raise ValueError(msg)
                    for token in record.tokens:
                        steps.append(token.step)
                        contexts.append(token.features)
                        actions.append(token.action)
                        logp.append(token.logp_behavior)
                        advantages.append(record.advantage)
                        trace_index.append(n_traces)
                n_traces += 1

        if not steps:
            msg = (
                "No token-level records to train on; "
                "only the toy backend provides them."
            )
            raise ValueError(msg)
        return cls(
            steps=np.array(steps, dtype=int),
            contexts=np.stack(contexts),
            actions=np.array(actions, dtype=int),
            logp_behavior=np.array(logp, dtype=float),
            advantages=np.array(advantages, dtype=float),
            trace_index=np.array(trace_index, dtype=int),
            n_traces=n_traces,
        )


@dataclass(frozen=True)
class LossTerms:
    """
    Diagnostics of one loss evaluation.

    Attributes:
        loss: The scalar loss.
        surrogate: Mean clipped surrogate over tokens.
        kl: Mean per-trace KL to the reference.
        clip_fraction: Fraction of tokens whose clipped term was active.
    """

    loss: float
    surrogate: float
    kl: float
    clip_fraction: float


def grpo_loss_terms(
    batch: TokenBatch, policy: ToyPolicy, cfg: GrpoConfig
) -> tuple[LossTerms, np.ndarray]:
    """
    Evaluate the GRPO loss and its analytic gradient on a token batch.

    loss = -(mean over tokens of the clipped surrogate) + beta * KL, where the
    KL is summed over each trace's steps and averaged over traces.

    Args:
        batch: The flattened tokens.
        policy: The policy being optimized.
        cfg: GRPO configuration.

    Returns:
        The loss terms and the gradient with respect to `policy.params`.
    """
    n_tokens = len(batch.steps)
    grad = np.zeros_like(policy.params)
    surrogate_sum = kl_sum = 0.0
    clipped_count = 0

    for step in range(N_STEPS):
        index = batch.steps == step
        if not index.any():
            continue
        x = batch.contexts[index]
        actions = batch.actions[index]
        advantages = batch.advantages[index]
        rows = np.arange(len(actions))

        p = policy.probabilities(step, x)
        q = policy.reference_probabilities(step, x)
        support = p > 0
        log_p = np.log(np.where(support, p, 1.0))
        log_q = np.log(np.where(support, q, 1.0))

        ratio = np.exp(log_p[rows, actions] - batch.logp_behavior[index])
        bounded = np.clip(ratio, 1.0 - cfg.clip_low, 1.0 + cfg.clip_high)
        unclipped = ratio * advantages
        surrogate = np.minimum(unclipped, bounded * advantages)
        active = unclipped <= bounded * advantages
        surrogate_sum += float(surrogate.sum())
        clipped_count += int((~active).sum())

        onehot = np.zeros((len(actions), VOCAB_SIZE))
        onehot[rows, actions] = 1.0
        d_surrogate = (advantages * ratio * active)[:, None] * (onehot - p)

        kl = np.sum(np.where(support, p * (log_p - log_q), 0.0), axis=1)
        kl_sum += float(kl.sum())
        d_kl = np.where(support, p * (log_p - log_q - kl[:, None]), 0.0)

        d_logits = -d_surrogate / n_tokens + cfg.beta_kl * d_kl / batch.n_traces
        grad[step] = d_logits.T @ x

    surrogate_mean = surrogate_sum / n_tokens
    kl_mean = kl_sum / batch.n_traces
    terms = LossTerms(
        loss=-surrogate_mean + cfg.beta_kl * kl_mean,
        surrogate=surrogate_mean,
        kl=kl_mean,
        clip_fraction=clipped_count / n_tokens,
    )
    return terms, grad


def grpo_loss(
    groups: Sequence[GroupSample], policy: ToyPolicy, cfg: GrpoConfig
) -> tuple[float, np.ndarray]:
    """
    Compute the GRPO loss and its gradient over whitened groups.

    Every token of a record is credited with the record's advantage.

    Args:
        groups: Groups whose records carry advantages and token data.
        policy: The policy being optimized.
        cfg: GRPO configuration.

    Returns:
        `(loss, gradient with respect to policy.params)`.
    """
    terms, grad = grpo_loss_terms(TokenBatch.from_groups(groups), policy, cfg)
    return terms.loss, grad


def clip_gradient(grad: np.ndarray, max_norm: float) -> np.ndarray:
    """Rescale `grad` so its global L2 norm is at most `max_norm`."""
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def apply_update(policy: ToyPolicy, grad: np.ndarray, cfg: GrpoConfig) -> float:
    """
    Take one clipped gradient-descent step on the loss, in place.

    Returns:
        The gradient norm before clipping.
    """
    norm = float(np.linalg.norm(grad))
    policy.params -= cfg.learning_rate * clip_gradient(grad, cfg.grad_clip_norm)
    return norm
