"""Defines the configuration and data models shared across the engine."""

from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any, Self

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    field_validator,
    model_validator,
)

from rethink_rm.criteria import (
    DEFAULT_CRITERIA,
    DEFAULT_DOMAIN_FAMILIES,
    DEFAULT_HIERARCHIES,
    CriteriaSet,
    TaskFamily,
    TaskHierarchy,
    hierarchy_for_domain,
)

# --- enums ---------------------------------------------------------------------


class RewardVariant(StrEnum):
    """Reward designs: the default and its ablations."""

    BINARY_DEFAULT = "binary_default"
    NO_FORMAT_CHECK = "no_format_check"
    SCALED_SCORE = "scaled_score"


class Turn1Mode(StrEnum):
    """How the first-turn buffer record is rewarded."""

    SAME_AS_FINAL = "same_as_final"
    FORMAT_ONLY = "format_only"


class PipelineMode(StrEnum):
    """Judgment pipelines: the full two-turn protocol and its ablations."""

    TWO_TURN_FULL = "two_turn_full"
    BRANCHING_ONLY = "branching_only"
    UNCONDITIONED_RETHINK = "unconditioned_rethink"
    SINGLE_TURN = "single_turn"


class Turn(StrEnum):
    """The two turns of a deliberation."""

    BRANCH = "branch"
    RETHINK = "rethink"


class Stage(StrEnum):
    """Which generation a request is for; routes local backends."""

    BRANCH = "branch"
    BRANCH_VERDICT = "branch_verdict"
    RETHINK = "rethink"
    UNCONDITIONED = "unconditioned"
    SINGLE = "single"
    ATTRIBUTION = "attribution"


class BackendKind(StrEnum):
    """Built-in generation backend kinds."""

    TOY = "toy"
    REMOTE = "remote"


class SwapControl(StrEnum):
    """Whether pairwise evaluation also judges the swapped presentation order."""

    OFF = "off"
    BOTH_ORDERS = "both_orders"


class AttributorKind(StrEnum):
    """Built-in sentence attributors."""

    LEXICON = "lexicon"
    EXTERNAL_JUDGE = "external_judge"


class Difficulty(StrEnum):
    """Difficulty tags carried by benchmark items."""

    EASY = "easy"
    NORMAL = "normal"
    HARD = "hard"


class ViolationCode(StrEnum):
    """The closed set of trace format violations."""

    MISSING_SECTION = "missing_section"
    CRITERIA_COUNT_OUT_OF_RANGE = "criteria_count_out_of_range"
    UNKNOWN_CRITERION = "unknown_criterion"
    MISSING_VERDICT = "missing_verdict"
    MULTIPLE_VERDICTS = "multiple_verdicts"
    INVALID_VERDICT_VALUE = "invalid_verdict_value"
    EMPTY_ANALYSIS = "empty_analysis"


# --- configuration -------------------------------------------------------------


class _Section(BaseModel):
    """Base for config sections: unknown keys are errors."""

    model_config = ConfigDict(extra="forbid")


class CriterionConfig(_Section):
    """One entry of a configured criteria menu."""

    name: str = Field(min_length=1)
    description: str = ""


class TraceConfig(_Section):
    """
    Configuration of the trace schema.

    Attributes:
        criteria: The criteria menu, in id order.
        hierarchies: Importance ordering per task family.
        domain_families: Which task family each domain tag belongs to.
    """

    criteria: list[CriterionConfig] = Field(
        default_factory=lambda: [
            CriterionConfig(name=name, description=description)
            for name, description in DEFAULT_CRITERIA
        ]
    )
    hierarchies: dict[TaskFamily, list[str]] = Field(
        default_factory=lambda: {
            family: list(ordering) for family, ordering in DEFAULT_HIERARCHIES.items()
        }
    )
    domain_families: dict[str, TaskFamily] = Field(
        default_factory=lambda: dict(DEFAULT_DOMAIN_FAMILIES)
    )

    @field_validator("hierarchies")
    @classmethod
    def _all_families(
        cls, value: dict[TaskFamily, list[str]]
    ) -> dict[TaskFamily, list[str]]:
        missing = set(TaskFamily) - set(value)
        if missing:
            msg = f"Missing hierarchies for: {sorted(missing)}"
            raise ValueError(msg)
        for family, ordering in value.items():
            TaskHierarchy(task_family=family, ordering=tuple(ordering))
        return value

    def criteria_set(self) -> CriteriaSet:
        """Build the configured `CriteriaSet`."""
        return CriteriaSet.from_pairs((c.name, c.description) for c in self.criteria)

    def hierarchy_for(self, domain: str | None) -> TaskHierarchy:
        """Pick the configured hierarchy for a domain tag."""
        return hierarchy_for_domain(
            domain,
            {family: tuple(ordering) for family, ordering in self.hierarchies.items()},
            {key.lower(): family for key, family in self.domain_families.items()},
        )


class RewardConfig(_Section):
    """
    Reward constants.

    Attributes:
        lambda_format: Penalty for a malformed trace; must be negative.
        w: Weight of the outcome term; must be positive.
        variant: The reward design in use.
        turn1_mode: How the first-turn record is rewarded.
    """

    lambda_format: float = Field(default=-100.0, lt=0)
    w: float = Field(default=10.0, gt=0)
    variant: RewardVariant = RewardVariant.BINARY_DEFAULT
    turn1_mode: Turn1Mode = Turn1Mode.SAME_AS_FINAL


class ToyEnvironmentConfig(_Section):
    """
    Shape of the synthetic judgment environment.

    Attributes:
        feature_dim: Number of features describing each synthetic response.
        bias_feature: Value of the constant feature appended to every context.
        seed: Generator seed; `None` uses the engine seed.
    """

    feature_dim: int = Field(default=4, ge=1)
    bias_feature: float = Field(default=3.0, gt=0)
    seed: int | None = None


class GrpoConfig(_Section):
    """
    GRPO and toy-training configuration.

    Attributes:
        clip_low: Lower clipping bound epsilon (ratio floor is 1 - clip_low).
        clip_high: Upper clipping bound epsilon (ratio ceiling is 1 + clip_high).
        beta_kl: Weight of the KL penalty to the reference policy.
        group_size: Rollouts per item (K).
        learning_rate: Step size of the toy optimizer.
        steps: Number of training steps.
        std_epsilon: Added to the group standard deviation when whitening.
        seed: Training seed; `None` uses the engine seed.
        grad_clip_norm: Gradients are rescaled to at most this norm.
        batch_items: Items sampled per training step.
        updates_per_step: Clipped policy updates made from each rollout batch.
        whiten_turns_separately: Whiten turn-1 and turn-2 records in separate
          pools instead of one pool of 2K records.
        init_scale: Standard deviation of the initial policy parameters.
        eval_every: Held-out evaluation interval in steps (0 disables).
        eval_items: Number of held-out items.
        environment: The toy environment shape.
    """

    clip_low: float = Field(default=0.2, gt=0, lt=1)
    clip_high: float = Field(default=0.28, gt=0, lt=1)
    beta_kl: float = Field(default=0.001, ge=0)
    group_size: int = Field(default=8, ge=2)
    learning_rate: float = Field(default=0.05, ge=0)
    steps: int = Field(default=400, ge=0)
    std_epsilon: float = Field(default=1e-8, gt=0)
    seed: int | None = None
    grad_clip_norm: float = Field(default=1.0, gt=0)
    batch_items: int = Field(default=16, ge=1)
    updates_per_step: int = Field(default=4, ge=1)
    whiten_turns_separately: bool = False
    init_scale: float = Field(default=0.0, ge=0)
    eval_every: int = Field(default=25, ge=0)
    eval_items: int = Field(default=1000, ge=1)
    environment: ToyEnvironmentConfig = Field(default_factory=ToyEnvironmentConfig)


class BackendConfig(_Section):
    """
    Generation backend descriptor.

    Attributes:
        kind: Built-in backend kind.
        class_path: Fully qualified class name overriding `kind`.
        endpoint: Base URL of a remote server.
        path: Request path appended to `endpoint`.
        model: Model identifier sent to a remote server.
        timeout_s: Per-request timeout in seconds.
        max_retries: Retries of transient failures before giving up.
        retry_backoff_s: Base of the exponential backoff between retries.
        max_concurrent: Cap on in-flight generation requests.
        api_key_env: Name of the environment variable holding the credential.
    """

    kind: BackendKind = BackendKind.TOY
    class_path: str | None = None
    endpoint: str = ""
    path: str = "/v1/chat/completions"
    model: str = ""
    timeout_s: float = Field(default=60.0, gt=0)
    max_retries: int = Field(default=3, ge=0)
    retry_backoff_s: float = Field(default=1.0, ge=0)
    max_concurrent: int = Field(default=8, ge=1)
    api_key_env: str = "RETHINK_RM_API_KEY"

    @model_validator(mode="after")
    def _remote_needs_endpoint(self) -> Self:
        if self.kind == BackendKind.REMOTE and self.class_path is None:
            if not self.endpoint:
                msg = "Remote backends need a non-empty endpoint."
                raise ValueError(msg)
            if not self.model:
                msg = "Remote backends need a non-empty model identifier."
                raise ValueError(msg)
        return self


class RolloutConfig(_Section):
    """
    Sampling settings and pipeline mode for rollouts.

    Attributes:
        mode: Which judgment pipeline to run.
        temperature: Sampling temperature.
        top_p: Nucleus sampling mass.
        top_k: Top-k sampling cutoff.
        max_new_tokens: Cap on generated tokens per turn.
        max_total_tokens: Cap on prompt plus generated tokens.
        branch_stop: Stop strings for the branching turn.
        rethink_stop: Stop strings for the rethinking turn.
        group_size: Rollouts per item for the `rollout` command.
    """

    mode: PipelineMode = PipelineMode.TWO_TURN_FULL
    temperature: float = Field(default=1.0, ge=0)
    top_p: float = Field(default=0.95, gt=0, le=1)
    top_k: int = Field(default=20, ge=1)
    max_new_tokens: int = Field(default=8192, ge=1)
    max_total_tokens: int = Field(default=16384, ge=1)
    branch_stop: list[str] = Field(default_factory=lambda: ["JUDGMENT:"])
    rethink_stop: list[str] = Field(default_factory=lambda: ["SELECTED:"])
    group_size: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _token_caps(self) -> Self:
        if self.max_new_tokens > self.max_total_tokens:
            msg = "max_new_tokens must not exceed max_total_tokens."
            raise ValueError(msg)
        return self


class EvalConfig(_Section):
    """
    Evaluation harness settings.

    Attributes:
        swap_control: Whether to judge both presentation orders.
        concurrency: Items evaluated in parallel.
        strict: Abort on backend failures instead of excluding the item.
        mode: Pipeline mode; `None` uses `rollout.mode`.
    """

    swap_control: SwapControl = SwapControl.BOTH_ORDERS
    concurrency: int = Field(default=8, ge=1)
    strict: bool = True
    mode: PipelineMode | None = None


class AnalyzerConfig(_Section):
    """
    Diffusion analyzer settings.

    Attributes:
        attributor: Which sentence attributor to use.
        lexicon_path: Lexicon JSON file; `None` uses the packaged lexicon.
        top_k: `k` of the reported top-k share.
    """

    attributor: AttributorKind = AttributorKind.LEXICON
    lexicon_path: str | None = None
    top_k: int = Field(default=2, ge=1)


class EngineConfig(_Section):
    """The complete, serializable configuration of one engine run."""

    trace: TraceConfig = Field(default_factory=TraceConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    grpo: GrpoConfig = Field(default_factory=GrpoConfig)
    backend: BackendConfig = Field(default_factory=BackendConfig)
    rollout: RolloutConfig = Field(default_factory=RolloutConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    analyzer: AnalyzerConfig = Field(default_factory=AnalyzerConfig)
    seed: int = 7
    log_level: str = "INFO"

    @property
    def training_seed(self) -> int:
        """The seed used for toy training."""
        return self.seed if self.grpo.seed is None else self.grpo.seed

    @property
    def environment_seed(self) -> int:
        """The seed used to build the toy environment."""
        env_seed = self.grpo.environment.seed
        return self.seed if env_seed is None else env_seed


# --- dataset items -------------------------------------------------------------

_LETTER_LABELS = {"a": 1, "b": 2}


class ComparisonItem(BaseModel):
    """
    One preference instance.

    Attributes:
        id: Item identifier.
        prompt: The user prompt (x).
        response_1: First response (y1).
        response_2: Second response (y2).
        label: Which response is preferred (z); for Best-of-N items, the
          1-based index of the winning candidate.
        domain: Optional domain tag, e.g. "code".
        difficulty: Optional difficulty tag.
        score_1: Optional score of response 1 on the -3..3 scale.
        score_2: Optional score of response 2 on the -3..3 scale.
        candidates: Optional Best-of-N candidate list.
        source: Name of the dataset file the item came from.
    """

    model_config = ConfigDict(frozen=True, extra="ignore")

    id: str
    prompt: str
    response_1: str = Field(min_length=1)
    response_2: str = Field(min_length=1)
    label: int
    domain: str | None = None
    difficulty: Difficulty | None = None
    score_1: int | None = Field(default=None, ge=-3, le=3)
    score_2: int | None = Field(default=None, ge=-3, le=3)
    candidates: tuple[str, ...] | None = None
    source: str | None = None

    @model_validator(mode="before")
    @classmethod
    def _fill_from_candidates(cls, data: Any) -> Any:  # noqa: ANN401
        if isinstance(data, dict) and data.get("candidates"):
            candidates = data["candidates"]
            data = dict(data)
            if len(candidates) >= 2:  # noqa: PLR2004
                data.setdefault("response_1", candidates[0])
                data.setdefault("response_2", candidates[1])
        return data

    @field_validator("id", mode="before")
    @classmethod
    def _id_as_text(cls, value: Any) -> Any:  # noqa: ANN401
        return str(value) if isinstance(value, int) else value

    @field_validator("label", mode="before")
    @classmethod
    def _letter_labels(cls, value: Any) -> Any:  # noqa: ANN401
        if isinstance(value, str):
            text = value.strip().lower()
            if text in _LETTER_LABELS:
                return _LETTER_LABELS[text]
            if text.isdigit():
                return int(text)
        return value

    @model_validator(mode="after")
    def _label_in_range(self) -> Self:
        if self.candidates is not None:
            if len(self.candidates) < 2:  # noqa: PLR2004
                msg = "Best-of-N items need at least two candidates."
                raise ValueError(msg)
            if not all(c.strip() for c in self.candidates):
                msg = "Candidates must be non-empty."
                raise ValueError(msg)
            if not 1 <= self.label <= len(self.candidates):
                msg = f"label must be in 1..{len(self.candidates)}, got {self.label}."
                raise ValueError(msg)
        elif self.label not in (1, 2):
            msg = f"label must be 1 or 2, got {self.label}."
            raise ValueError(msg)
        if not self.response_1.strip() or not self.response_2.strip():
            msg = "Responses must be non-empty."
            raise ValueError(msg)
        return self

    def swapped(self) -> "ComparisonItem":
        """Return the same comparison with the two responses presented in reverse."""
        return ComparisonItem(
            id=self.id,
            prompt=self.prompt,
            response_1=self.response_2,
            response_2=self.response_1,
            label=3 - self.label,
            domain=self.domain,
            difficulty=self.difficulty,
            score_1=self.score_2,
            score_2=self.score_1,
            source=self.source,
        )

    def pair(self, first: int, second: int) -> "ComparisonItem":
        """
        Build a pairwise item from two Best-of-N candidates (1-based indices).

        The label marks which of the two is the gold winner (2 when neither is).
        """
        if self.candidates is None:
            msg = f"Item {self.id} has no candidates."
            raise ValueError(msg)
        return ComparisonItem(
            id=f"{self.id}#{first}v{second}",
            prompt=self.prompt,
            response_1=self.candidates[first - 1],
            response_2=self.candidates[second - 1],
            label=1 if self.label == first else 2,
            domain=self.domain,
            difficulty=self.difficulty,
            source=self.source,
        )


# --- traces --------------------------------------------------------------------


@dataclass(frozen=True)
class FormatViolation:
    """
    One structural deviation from the trace format.

    Attributes:
        code: The violation class.
        detail: Human-readable specifics.
    """

    code: ViolationCode
    detail: str

    def __str__(self) -> str:
        """Render as "<code>: <detail>"."""
        return f"{self.code.value}: {self.detail}"


@dataclass(frozen=True)
class BranchTrace:
    """
    The first, adaptive-branching turn.

    Attributes:
        selected: Ids of the 1-3 selected criteria.
        analysis_1: Issue analysis of response 1.
        analysis_2: Issue analysis of response 2.
        raw: The complete first-turn text.
    """

    selected: tuple[int, ...]
    analysis_1: str
    analysis_2: str
    raw: str


@dataclass(frozen=True)
class RethinkTrace:
    """
    The second, branch-conditioned rethinking turn.

    Attributes:
        judgment: The comparative judgment text.
        verdict: Which response wins (1 or 2).
        raw: The complete second-turn text.
        score: Predicted score of response 1 under the scaled variant.
    """

    judgment: str
    verdict: int
    raw: str
    score: int | None = None


@dataclass(frozen=True)
class MalformedTurn:
    """A turn that failed to parse, with every violation found."""

    raw: str
    violations: tuple[FormatViolation, ...]


@dataclass(frozen=True)
class DeliberationTrace:
    """
    A complete two-turn judgment record.

    Attributes:
        branch: The parsed first turn, `None` when it was malformed.
        rethink: The parsed second turn, `None` when it was malformed.
        branch_raw: First-turn text.
        rethink_raw: Second-turn text (empty for single-generation modes).
        branch_violations: Violations found in the first turn.
        rethink_violations: Violations found in the second turn.
    """

    branch: BranchTrace | None
    rethink: RethinkTrace | None
    branch_raw: str
    rethink_raw: str
    branch_violations: tuple[FormatViolation, ...] = ()
    rethink_violations: tuple[FormatViolation, ...] = ()

    @property
    def violations(self) -> tuple[FormatViolation, ...]:
        """All violations, first turn first."""
        return self.branch_violations + self.rethink_violations

    @property
    def well_formed(self) -> bool:
        """Whether both turns parsed without violations."""
        return not self.violations

    @property
    def text(self) -> str:
        """The full trace text, first turn then second."""
        return self.branch_raw + self.rethink_raw

    @property
    def verdict(self) -> int | None:
        """The extracted verdict, if the second turn parsed."""
        return self.rethink.verdict if self.rethink is not None else None


# --- generation and rollouts ---------------------------------------------------


@dataclass(frozen=True)
class GenerationRequest:
    """
    One generation call against a backend.

    Attributes:
        prompt: The rendered prompt.
        stop_strings: Generation stops at the first of these.
        temperature: Sampling temperature.
        top_p: Nucleus sampling mass.
        top_k: Top-k cutoff.
        max_new_tokens: Cap on generated tokens.
        max_total_tokens: Cap on prompt plus generated tokens.
        metadata: Routing hints for local backends (item id, stage, ...);
          never sent over the wire.
    """

    prompt: str
    stop_strings: tuple[str, ...] = ()
    temperature: float = 1.0
    top_p: float = 0.95
    top_k: int = 20
    max_new_tokens: int = 8192
    max_total_tokens: int = 16384
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Reject inconsistent token caps."""
        if self.max_new_tokens > self.max_total_tokens:
            msg = "max_new_tokens must not exceed max_total_tokens."
            raise ValueError(msg)


@dataclass(frozen=True, eq=False)
class TokenStep:
    """
    One sampled token of a toy trace, with what the GRPO loss needs.

    Attributes:
        step: Step position (0 = criterion slot, 1 = verdict slot).
        features: Context feature vector the token was sampled from.
        action: Sampled action id.
        logp_behavior: Log-probability under the policy that sampled it.
        logp_reference: Log-probability under the frozen reference policy.
    """

    step: int
    features: np.ndarray
    action: int
    logp_behavior: float
    logp_reference: float


@dataclass(frozen=True)
class Completion:
    """
    What a backend returns for one request.

    Attributes:
        text: Generated text.
        token_count: Backend-reported completion tokens, if known.
        tokens: Token-level records (toy backend only).
    """

    text: str
    token_count: int | None = None
    tokens: tuple[TokenStep, ...] = ()


@dataclass(frozen=True)
class GenerationResult:
    """
    A completion after stop-string truncation and token accounting.

    Attributes:
        text: Generated text, cut at the first stop string.
        token_count: Completion token count.
        approximate: Whether `token_count` was whitespace-approximated.
        truncated: Whether the generation hit a token cap.
        retry_count: Transient failures retried before success.
        tokens: Token-level records (toy backend only).
    """

    text: str
    token_count: int
    approximate: bool
    truncated: bool = False
    retry_count: int = 0
    tokens: tuple[TokenStep, ...] = ()


@dataclass(frozen=True)
class RewardBreakdown:
    """
    Reward terms of one trace.

    Attributes:
        format: Format term (0 or lambda_format).
        outcome: Outcome term (0 when skipped for malformed traces).
        composite: format + w * outcome for well-formed traces, format otherwise.
        turn1_reward: Reward assigned to the first-turn record.
        turn2_reward: Reward assigned to the second-turn record.
    """

    format: float
    outcome: float
    composite: float
    turn1_reward: float
    turn2_reward: float


@dataclass(frozen=True)
class RolloutRecord:
    """
    One update/evaluation buffer record (one per turn).

    Attributes:
        item_id: The judged item.
        rollout_index: Index of the rollout within its group.
        turn: Which turn produced it.
        context: The prompt the turn was generated from.
        generated: The generated text.
        reward: Reward assigned to this turn.
        token_count: Completion tokens.
        approximate_tokens: Whether `token_count` is approximate.
        tokens: Token-level records (toy backend only).
        advantage: Whitened advantage, set by the trainer.
        truncated: Whether the generation hit a token cap.
    """

    item_id: str
    rollout_index: int
    turn: Turn
    context: str
    generated: str
    reward: float
    token_count: int
    approximate_tokens: bool = True
    tokens: tuple[TokenStep, ...] = ()
    advantage: float | None = None
    truncated: bool = False


@dataclass(frozen=True)
class Rollout:
    """
    One judged rollout: its trace, rewards and buffer records.

    Attributes:
        item_id: The judged item.
        rollout_index: Index within its group.
        label: The gold label the rewards were computed against.
        trace: The assembled trace.
        rewards: The reward breakdown.
        records: One record per generation turn.
    """

    item_id: str
    rollout_index: int
    label: int
    trace: DeliberationTrace
    rewards: RewardBreakdown
    records: tuple[RolloutRecord, ...]


@dataclass(frozen=True)
class GroupSample:
    """
    K rollouts of one item: the GRPO unit of work.

    Attributes:
        item_id: The judged item.
        rollouts: The K rollouts.
        advantages: Per-rollout advantages (empty until whitened).
    """

    item_id: str
    rollouts: tuple[Rollout, ...]
    advantages: tuple[float, ...] = ()

    @property
    def rewards(self) -> tuple[float, ...]:
        """Terminal reward r(tau) of each rollout."""
        return tuple(rollout.rewards.composite for rollout in self.rollouts)
