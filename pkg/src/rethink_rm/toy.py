"""
A desk-scale judgment environment and a softmax-linear judge policy.

A toy trace is two tokens. At step 0 the policy picks one of nine criterion
tokens or a filler token that breaks the format; at step 1 it picks verdict 1,
verdict 2 or filler. Each synthetic comparison is two feature vectors, and the
true winner is the one scoring higher under a hidden weight vector.
"""

import zlib
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from loguru import logger

from rethink_rm.criteria import MAX_CRITERIA, CriteriaSet
from rethink_rm.model import ComparisonItem, ToyEnvironmentConfig
from rethink_rm.parsers import format_branch_turn, format_rethink_turn

N_STEPS = 2
VERDICT_1 = MAX_CRITERIA
VERDICT_2 = MAX_CRITERIA + 1
FILLER = MAX_CRITERIA + 2
VOCAB_SIZE = MAX_CRITERIA + 3

STEP_ACTIONS: tuple[tuple[int, ...], ...] = (
    (*range(MAX_CRITERIA), FILLER),
    (VERDICT_1, VERDICT_2, FILLER),
)

_ALLOWED = np.zeros((N_STEPS, VOCAB_SIZE), dtype=bool)
for _step, _actions in enumerate(STEP_ACTIONS):
    _ALLOWED[_step, list(_actions)] = True


def stable_hash(text: str) -> int:
    """Hash `text` the same way in every process."""
    return zlib.crc32(text.encode("utf-8"))


def derive_rng(*keys: int | str) -> np.random.Generator:
    """Build a generator seeded from integer and string keys."""
    entropy = [k if isinstance(k, int) else stable_hash(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True, eq=False)
class ToyComparison:
    """
    The hidden side of a synthetic comparison.

    Attributes:
        features_1: Feature vector of response 1.
        features_2: Feature vector of response 2.
        label: The true winner (1 or 2).
    """

    features_1: np.ndarray
    features_2: np.ndarray
    label: int


class ToyEnvironment:
    """Generates synthetic comparisons whose winner is set by a hidden linear score."""

    def __init__(self, feature_dim: int, seed: int, bias_feature: float = 3.0) -> None:
        """
        Instantiate a `ToyEnvironment`.

        Args:
          feature_dim: Number of features per synthetic response.
          seed: Generator seed; fixes the hidden weights and every item.
          bias_feature: Constant feature appended to every context.
        """
        if feature_dim < 1:
            msg = f"feature_dim must be at least 1, got {feature_dim}."
            raise ValueError(msg)
        self.feature_dim = feature_dim
        self.seed = seed
        self.bias_feature = bias_feature
        hidden = derive_rng(seed, "hidden").normal(size=feature_dim)
        self.hidden = hidden / np.linalg.norm(hidden)
        self._comparisons: dict[str, ToyComparison] = {}

    @classmethod
    def from_config(cls, config: ToyEnvironmentConfig, seed: int) -> "ToyEnvironment":
        """Build the environment described by `config`."""
        return cls(config.feature_dim, seed, config.bias_feature)

    @property
    def context_dim(self) -> int:
        """Length of a context vector: feature difference, bias, criterion one-hot."""
        return self.feature_dim + 1 + MAX_CRITERIA

    def comparison(self, item_id: str) -> ToyComparison:
        """Return the hidden comparison behind `item_id` (deterministic per id)."""
        cached = self._comparisons.get(item_id)
        if cached is not None:
            return cached
        features = derive_rng(self.seed, "item", item_id).normal(
            size=(2, self.feature_dim)
        )
        label = 1 if self.hidden @ features[0] >= self.hidden @ features[1] else 2
        comparison = ToyComparison(features[0], features[1], label)
        self._comparisons[item_id] = comparison
        return comparison

    def item(self, item_id: str) -> ComparisonItem:
        """Render the comparison behind `item_id` as a `ComparisonItem`."""
        comparison = self.comparison(item_id)
        return ComparisonItem(
            id=item_id,
            prompt=f"Toy comparison {item_id}: which feature vector scores higher?",
            response_1=np.array2string(comparison.features_1, precision=3),
            response_2=np.array2string(comparison.features_2, precision=3),
            label=comparison.label,
            domain="toy",
        )

    def sample_items(self, n: int, prefix: str) -> list[ComparisonItem]:
        """Build `n` items with ids `<prefix>-<index>`."""
        return [self.item(f"{prefix}-{index}") for index in range(n)]

    def context(
        self, item_id: str, step: int, criterion: int | None = None
    ) -> np.ndarray:
        """
        Build the context vector the policy sees at `step`.

        Args:
          item_id: The item being judged.
          step: 0 for the criterion slot, 1 for the verdict slot.
          criterion: Criterion token chosen at step 0; only used at step 1.

        Returns:
          `[f1 - f2, bias, one-hot(criterion)]`.
        """
        comparison = self.comparison(item_id)
        x = np.zeros(self.context_dim)
        x[: self.feature_dim] = comparison.features_1 - comparison.features_2
        x[self.feature_dim] = self.bias_feature
        if step == 1 and criterion is not None and 0 <= criterion < MAX_CRITERIA:
            x[self.feature_dim + 1 + criterion] = 1.0
        return x


def masked_softmax(logits: np.ndarray, step: int) -> np.ndarray:
    """Softmax over the actions allowed at `step`; disallowed actions get 0."""
    allowed = _ALLOWED[step]
    masked = np.where(allowed, logits, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    weights = np.where(allowed, np.exp(shifted), 0.0)
    return weights / weights.sum(axis=-1, keepdims=True)


class ToyPolicy:
    """
    A softmax-linear policy with one weight matrix per step position.

    `params[s]` maps a context vector to logits over the whole vocabulary at
    step `s`. The reference parameters are a frozen copy taken at construction.
    """

    def __init__(
        self, params: np.ndarray, reference_params: np.ndarray | None = None
    ) -> None:
        """
        Instantiate a `ToyPolicy`.

        Args:
          params: Array of shape (2, vocabulary size, context dim).
          reference_params: Frozen reference parameters; defaults to a copy of
            `params`.
        """
        expected = (N_STEPS, VOCAB_SIZE)
        if params.ndim != 3 or params.shape[:2] != expected:  # noqa: PLR2004
            msg = f"params must have shape (2, {VOCAB_SIZE}, D), got {params.shape}."
            raise ValueError(msg)
        self.params = np.array(params, dtype=float)
        reference = params if reference_params is None else reference_params
        self._reference = np.array(reference, dtype=float)
        self._reference.flags.writeable = False

    @classmethod
    def initial(
        cls, context_dim: int, seed: int, init_scale: float = 0.0
    ) -> "ToyPolicy":
        """Build a policy with N(0, init_scale^2) parameters."""
        shape = (N_STEPS, VOCAB_SIZE, context_dim)
        params = (
            derive_rng(seed, "policy").normal(scale=init_scale, size=shape)
            if init_scale > 0
            else np.zeros(shape)
        )
        return cls(params)

    @property
    def reference_params(self) -> np.ndarray:
        """The frozen reference parameters (read-only)."""
        return self._reference

    def with_params(self, params: np.ndarray) -> "ToyPolicy":
        """Return a policy with new parameters and the same reference."""
        return ToyPolicy(params, self._reference)

    def probabilities(self, step: int, contexts: np.ndarray) -> np.ndarray:
        """Action probabilities at `step` for one context or a stack of them."""
        return masked_softmax(contexts @ self.params[step].T, step)

    def reference_probabilities(self, step: int, contexts: np.ndarray) -> np.ndarray:
        """Reference-policy action probabilities at `step`."""
        return masked_softmax(contexts @ self._reference[step].T, step)

    def sample(
        self, step: int, context: np.ndarray, rng: np.random.Generator
    ) -> tuple[int, float, float]:
        """
        Sample one action.

        Returns:
            `(action, log-prob under the policy, log-prob under the reference)`.
        """
        probs = self.probabilities(step, context)
        action = int(rng.choice(VOCAB_SIZE, p=probs))
        reference = self.reference_probabilities(step, context)
        return action, float(np.log(probs[action])), float(np.log(reference[action]))


def render_branch_tokens(action: int, criteria: CriteriaSet) -> str:
    """Render a step-0 token as a first turn; filler drops the selection line."""
    analysis_1 = "Response 1 is checked on the chosen dimension."
    analysis_2 = "Response 2 is checked on the chosen dimension."
    if action == FILLER:
        return format_branch_turn([], analysis_1, analysis_2).split("\n", 1)[1]
    # criterion tokens past the end of a short menu name nothing the parser knows
    name = (
        criteria.by_id(action + 1).name
        if action < len(criteria)
        else f"Dimension {action + 1}"
    )
    return format_branch_turn([name], analysis_1, analysis_2)


def render_verdict_tokens(action: int) -> str:
    """Render a step-1 token as a verdict turn; filler leaves out the verdict."""
    judgment = "Weighing both analyses, the stronger response is clear."
    if action == VERDICT_1:
        return format_rethink_turn(judgment, 1)
    if action == VERDICT_2:
        return format_rethink_turn(judgment, 2)
    return format_rethink_turn(judgment, 1).rsplit("\\boxed", 1)[0]


@dataclass(frozen=True)
class PolicyEvaluation:
    """
    Exact held-out metrics of a toy policy.

    Attributes:
        accuracy: Expected accuracy of the greedy verdict (ties pick verdict 1),
          with the step-0 token sampled.
        format_violation_rate: Probability that a sampled trace is malformed.
        sampled_accuracy: Probability that a sampled trace is well-formed and
          correct.
        n_items: Number of items evaluated.
    """

    accuracy: float
    format_violation_rate: float
    sampled_accuracy: float
    n_items: int


def evaluate_policy(
    env: ToyEnvironment, policy: ToyPolicy, items: Sequence[ComparisonItem]
) -> PolicyEvaluation:
    """
    Compute exact held-out metrics of `policy` on `items`.

    Args:
        env: The environment the items come from.
        policy: The policy to evaluate.
        items: Held-out items built by `env`.

    Returns:
        The expectations, averaged over `items`.
    """
    if not items:
        msg = "Cannot evaluate a policy on zero items."
        raise ValueError(msg)

    first_actions = STEP_ACTIONS[0]
    accuracy = violations = sampled = 0.0
    for item in items:
        label = env.comparison(item.id).label
        p0 = policy.probabilities(0, env.context(item.id, 0))
        contexts = np.stack(
            [env.context(item.id, 1, a if a != FILLER else None) for a in first_actions]
        )
        p1 = policy.probabilities(1, contexts)
        weights = p0[list(first_actions)]

        greedy = np.where(p1[:, VERDICT_1] >= p1[:, VERDICT_2], 1, 2)
        accuracy += float(weights @ (greedy == label))

        correct_token = VERDICT_1 if label == 1 else VERDICT_2
        well_formed = np.array([a != FILLER for a in first_actions], dtype=float)
        ok = weights * well_formed
        violations += 1.0 - float(ok @ (1.0 - p1[:, FILLER]))
        sampled += float(ok @ p1[:, correct_token])

    n = len(items)
    result = PolicyEvaluation(
        accuracy=accuracy / n,
        format_violation_rate=violations / n,
        sampled_accuracy=sampled / n,
        n_items=n,
    )
    logger.debug(
        "Held-out accuracy {accuracy:.4f}, violation rate {rate:.4f} on {n} items",
        accuracy=result.accuracy,
        rate=result.format_violation_rate,
        n=n,
    )
    return result
