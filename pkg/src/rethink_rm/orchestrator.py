"""Drives the judgment workflow against a generation backend."""

import threading
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor

from loguru import logger
from tenacity import (
    RetryCallState,
    RetryError,
    Retrying,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from rethink_rm.backends import Backend
from rethink_rm.errors import (
    BackendUnavailableError,
    ConfigError,
    TransientBackendError,
)
from rethink_rm.model import (
    BranchTrace,
    Completion,
    ComparisonItem,
    DeliberationTrace,
    EngineConfig,
    GenerationRequest,
    GenerationResult,
    GroupSample,
    PipelineMode,
    RewardVariant,
    Rollout,
    RolloutRecord,
    Stage,
    Turn,
)
from rethink_rm.parsers import (
    assemble_trace,
    parse_branch,
    parse_rethink,
    split_single_turn,
)
from rethink_rm.prompts import (
    render_branch_prompt,
    render_raw_rethink_prompt,
    render_rethink_prompt,
    render_single_turn_prompt,
    render_unconditioned_rethink_prompt,
)
from rethink_rm.rewards import composite_reward, scaled_truth

_TURN_ORDER = {Turn.BRANCH: 0, Turn.RETHINK: 1}


def approximate_tokens(text: str) -> int:
    """Count whitespace-separated tokens."""
    return len(text.split())


def truncate_at_stop(text: str, stop_strings: Iterable[str]) -> str:
    """Cut `text` before the earliest occurrence of any stop string."""
    cut = len(text)
    for stop in stop_strings:
        if stop:
            index = text.find(stop)
            if 0 <= index < cut:
                cut = index
    return text[:cut]


def canonical_records(rollouts: Iterable[Rollout]) -> list[RolloutRecord]:
    """Flatten rollouts into records ordered by (item id, rollout index, turn)."""
    records = [record for rollout in rollouts for record in rollout.records]
    return sorted(
        records,
        key=lambda r: (r.item_id, r.rollout_index, _TURN_ORDER[r.turn]),
    )


class RolloutOrchestrator:
    """Runs judgment rollouts: prompt, generate, parse, reward, record."""

    def __init__(self, config: EngineConfig, backend: Backend) -> None:
        """
        Instantiate a new RolloutOrchestrator.

        Args:
          config: The engine configuration.
          backend: The backend that serves generations.
        """
        self._validate_config(config)
        self.config = config
        self.backend = backend
        self.criteria = config.trace.criteria_set()
        self.max_concurrent = min(config.backend.max_concurrent, backend.max_concurrent)
        self._slots = threading.BoundedSemaphore(self.max_concurrent)
        logger.info(
            "Orchestrator ready: mode {mode}, at most {n} requests in flight",
            mode=config.rollout.mode,
            n=self.max_concurrent,
        )

    def _validate_config(self, config: EngineConfig) -> None:
        """
        Validate the parts of an `EngineConfig` that span sections.

        Args:
          config: The configuration to validate.

        Raises:
          ConfigError: If the configuration is inconsistent.
        """
        try:
            config.trace.criteria_set()
        except ValueError as e:
            msg = f"trace.criteria: {e}"
            raise ConfigError(msg) from e

        modes = {config.rollout.mode, config.eval.mode or config.rollout.mode}
        if (
            config.reward.variant == RewardVariant.SCALED_SCORE
            and PipelineMode.BRANCHING_ONLY in modes
        ):
            msg = (
                "reward.variant: scaled scores need a verdict turn; "
                "branching_only has none."
            )
            raise ConfigError(msg)

    # --- generation ----------------------------------------------------------

    def _complete(self, request: GenerationRequest) -> Completion:
        with self._slots:
            return self.backend.complete(request)

    @staticmethod
    def _log_retry(state: RetryCallState) -> None:
        error = state.outcome.exception() if state.outcome else None
        logger.warning(
            "Transient backend failure on attempt {attempt}: {error}",
            attempt=state.attempt_number,
            error=error,
        )

    def generate(self, request: GenerationRequest) -> GenerationResult:
        """
        Generate one completion with retries, stop strings and token accounting.

        Args:
          request: The generation request.

        Returns:
          The completion truncated at its first stop string.

        Raises:
          BackendUnavailableError: If transient failures outlast the retries.
        """
        backend_cfg = self.config.backend
        retrying = Retrying(
            retry=retry_if_exception_type(TransientBackendError),
            stop=stop_after_attempt(backend_cfg.max_retries + 1),
            wait=wait_exponential(multiplier=backend_cfg.retry_backoff_s),
            before_sleep=self._log_retry,
        )
        completion: Completion | None = None
        attempts = 0
        try:
            for attempt in retrying:
                with attempt:
                    attempts = attempt.retry_state.attempt_number
                    completion = self._complete(request)
        except RetryError as e:
            cause = e.last_attempt.exception()
            msg = f"Backend unavailable after {attempts} attempts: {cause}"
            raise BackendUnavailableError(msg) from e
        if completion is None:
            msg = "Backend returned no completion."
            raise BackendUnavailableError(msg)

        text = truncate_at_stop(completion.text, request.stop_strings)
        if completion.token_count is not None:
            token_count, approximate = completion.token_count, False
        else:
            token_count, approximate = approximate_tokens(text), True
        truncated = (
            token_count >= request.max_new_tokens
            or approximate_tokens(request.prompt) + token_count
            > request.max_total_tokens
        )
        if truncated:
            logger.warning(
                "Generation for {item} hit the token cap ({n} tokens)",
                item=request.metadata.get("item_id", "?"),
                n=token_count,
            )
        return GenerationResult(
            text=text,
            token_count=token_count,
            approximate=approximate,
            truncated=truncated,
            retry_count=attempts - 1,
            tokens=completion.tokens,
        )

    def build_request(
        self,
        prompt: str,
        stage: Stage,
        stop_strings: Iterable[str],
        metadata: dict[str, str],
    ) -> GenerationRequest:
        """Build a request carrying the configured sampling settings and `stage`."""
        rollout = self.config.rollout
        return GenerationRequest(
            prompt=prompt,
            stop_strings=tuple(stop_strings),
            temperature=rollout.temperature,
            top_p=rollout.top_p,
            top_k=rollout.top_k,
            max_new_tokens=rollout.max_new_tokens,
            max_total_tokens=rollout.max_total_tokens,
            metadata={**metadata, "stage": stage.value},
        )

    # --- rollouts ------------------------------------------------------------

    def _record(  # noqa: PLR0913
        self,
        item: ComparisonItem,
        rollout_index: int,
        turn: Turn,
        prompt: str,
        result: GenerationResult,
        reward: float,
    ) -> RolloutRecord:
        return RolloutRecord(
            item_id=item.id,
            rollout_index=rollout_index,
            turn=turn,
            context=prompt,
            generated=result.text,
            reward=reward,
            token_count=result.token_count,
            approximate_tokens=result.approximate,
            tokens=result.tokens,
            truncated=result.truncated,
        )

    def rollout_two_turn(
        self,
        item: ComparisonItem,
        *,
        mode: PipelineMode | None = None,
        rollout_index: int = 0,
        round_index: int = 0,
        tag: str = "",
    ) -> Rollout:
        """
        Run one judgment of `item` in the given pipeline mode.

        Two-turn modes emit one record per turn; `branching_only` and
        `single_turn` emit a single record. A malformed first turn still
        proceeds to the second, and the trace keeps its violations.

        Args:
          item: A pairwise comparison.
          mode: Pipeline mode; defaults to `rollout.mode`.
          rollout_index: Index of this rollout within its group.
          round_index: Training step or evaluation pass, for backend routing.
          tag: Extra routing tag, e.g. the presentation order.

        Returns:
          The rollout with its trace, rewards and records.

        Raises:
          ValueError: If `item` is a Best-of-N item.
        """
        if item.candidates is not None:
            msg = f"Item {item.id} is a Best-of-N item; judge its pairs instead."
            raise ValueError(msg)

        mode = mode or self.config.rollout.mode
        scaled = self.config.reward.variant == RewardVariant.SCALED_SCORE
        hierarchy = self.config.trace.hierarchy_for(item.domain)
        meta = {
            "item_id": item.id,
            "rollout": str(rollout_index),
            "round": str(round_index),
            "tag": tag,
        }
        rollout_cfg = self.config.rollout

        logger.debug(
            "Rollout {index} of {item_id} in mode {mode}",
            index=rollout_index,
            item_id=item.id,
            mode=mode,
        )

        if mode == PipelineMode.SINGLE_TURN:
            prompt = render_single_turn_prompt(
                item, self.criteria, hierarchy, scaled=scaled
            )
            result = self.generate(self.build_request(prompt, Stage.SINGLE, (), meta))
            branch_part, rethink_part = split_single_turn(result.text)
            trace = assemble_trace(
                parse_branch(branch_part, self.criteria),
                parse_rethink(rethink_part, scaled=scaled),
            )
            return self._finish(
                item, rollout_index, trace, [(Turn.RETHINK, prompt, result)]
            )

        if mode == PipelineMode.BRANCHING_ONLY:
            prompt = render_branch_prompt(item, self.criteria, require_verdict=True)
            result = self.generate(
                self.build_request(
                    prompt, Stage.BRANCH_VERDICT, rollout_cfg.branch_stop, meta
                )
            )
            trace = assemble_trace(
                parse_branch(result.text, self.criteria),
                parse_rethink(result.text, require_judgment=False),
                rethink_raw="",
            )
            return self._finish(
                item, rollout_index, trace, [(Turn.BRANCH, prompt, result)]
            )

        branch_prompt = render_branch_prompt(item, self.criteria)
        first = self.generate(
            self.build_request(
                branch_prompt, Stage.BRANCH, rollout_cfg.branch_stop, meta
            )
        )
        branch = parse_branch(first.text, self.criteria)

        if mode == PipelineMode.UNCONDITIONED_RETHINK:
            stage = Stage.UNCONDITIONED
            rethink_prompt = render_unconditioned_rethink_prompt(
                item, self.criteria, scaled=scaled
            )
        elif isinstance(branch, BranchTrace):
            stage = Stage.RETHINK
            rethink_prompt = render_rethink_prompt(
                item, branch, hierarchy, self.criteria, scaled=scaled
            )
        else:
            stage = Stage.RETHINK
            rethink_prompt = render_raw_rethink_prompt(
                item, first.text, hierarchy, scaled=scaled
            )

        selected = (
            ",".join(str(cid) for cid in branch.selected)
            if isinstance(branch, BranchTrace)
            else ""
        )
        second = self.generate(
            self.build_request(
                rethink_prompt,
                stage,
                rollout_cfg.rethink_stop,
                {**meta, "selected": selected},
            )
        )
        trace = assemble_trace(branch, parse_rethink(second.text, scaled=scaled))
        return self._finish(
            item,
            rollout_index,
            trace,
            [
                (Turn.BRANCH, branch_prompt, first),
                (Turn.RETHINK, rethink_prompt, second),
            ],
        )

    def _finish(
        self,
        item: ComparisonItem,
        rollout_index: int,
        trace: DeliberationTrace,
        turns: Sequence[tuple[Turn, str, GenerationResult]],
    ) -> Rollout:
        reward_cfg = self.config.reward
        truth = (
            scaled_truth(item)
            if reward_cfg.variant == RewardVariant.SCALED_SCORE
            else None
        )
        rewards = composite_reward(trace, item.label, reward_cfg, truth_score=truth)
        records = []
        for turn, prompt, result in turns:
            reward = (
                rewards.turn1_reward
                if turn == Turn.BRANCH and len(turns) > 1
                else rewards.turn2_reward
            )
            records.append(
                self._record(item, rollout_index, turn, prompt, result, reward)
            )
        if not trace.well_formed:
            logger.debug(
                "Malformed trace for {item_id}: {violations}",
                item_id=item.id,
                violations=[str(v) for v in trace.violations],
            )
        return Rollout(
            item_id=item.id,
            rollout_index=rollout_index,
            label=item.label,
            trace=trace,
            rewards=rewards,
            records=tuple(records),
        )

    def rollout_batch(
        self,
        items: Sequence[ComparisonItem],
        k: int,
        *,
        round_index: int = 0,
        mode: PipelineMode | None = None,
    ) -> list[GroupSample]:
        """
        Run K rollouts for every item, concurrently.

        Args:
          items: The items to judge.
          k: Rollouts per item.
          round_index: Training step, for backend routing.
          mode: Pipeline mode; defaults to `rollout.mode`.

        Returns:
          One `GroupSample` per item, in input order, with rollouts in index order.

        Raises:
          ValueError: If `k` is below 2.
        """
        if k < 2:  # noqa: PLR2004
            msg = f"A group needs K >= 2 rollouts, got {k}."
            raise ValueError(msg)

        jobs = [(item, index) for item in items for index in range(k)]
        with ThreadPoolExecutor(max_workers=self.max_concurrent) as pool:
            futures = [
                pool.submit(
                    self.rollout_two_turn,
                    item,
                    mode=mode,
                    rollout_index=index,
                    round_index=round_index,
                )
                for item, index in jobs
            ]
            rollouts = [future.result() for future in futures]

        return [
            GroupSample(
                item_id=item.id,
                rollouts=tuple(rollouts[position * k : (position + 1) * k]),
            )
            for position, item in enumerate(items)
        ]

    def rollout_group(
        self,
        item: ComparisonItem,
        k: int,
        *,
        round_index: int = 0,
        mode: PipelineMode | None = None,
    ) -> GroupSample:
        """
        Run K independent rollouts of one item.

        Any failed rollout fails the whole group.

        Args:
          item: The item to judge.
          k: Rollouts in the group (K >= 2).
          round_index: Training step, for backend routing.
          mode: Pipeline mode; defaults to `rollout.mode`.

        Returns:
          The group, with rewards attached and advantages left empty.
        """
        return self.rollout_batch([item], k, round_index=round_index, mode=mode)[0]

    def rollout_items(
        self,
        items: Sequence[ComparisonItem],
        *,
        mode: PipelineMode | None = None,
        round_index: int = 0,
        tag: str = "",
    ) -> list[Rollout]:
        """
        Judge each item once, concurrently, returning rollouts in input order.

        Args:
          items: The items to judge.
          mode: Pipeline mode; defaults to `rollout.mode`.
          round_index: Evaluation pass, for backend routing.
          tag: Extra routing tag passed to every request.

        Returns:
          One rollout per item.
        """
        with ThreadPoolExecutor(max_workers=self.max_concurrent) as pool:
            futures = [
                pool.submit(
                    self.rollout_two_turn,
                    item,
                    mode=mode,
                    round_index=round_index,
                    tag=tag,
                )
                for item in items
            ]
            return [future.result() for future in futures]
