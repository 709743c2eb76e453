# ruff: noqa: D100, D103, S101
import pytest

from rethink_rm.backends import ToyBackend
from rethink_rm.errors import BackendUnavailableError, ConfigError
from rethink_rm.model import EngineConfig, GenerationRequest, PipelineMode, Stage, Turn
from rethink_rm.orchestrator import (
    RolloutOrchestrator,
    approximate_tokens,
    canonical_records,
    truncate_at_stop,
)
from rethink_rm.toy import ToyEnvironment
from tests.rethink_rm.conftest import make_bon_item, make_item
from tests.rethink_rm.mocks import (
    BRANCH_TEXT,
    CannedBackend,
    CountingBackend,
    FlakyBackend,
    FlipBackend,
    OracleBackend,
    ScriptedBackend,
    oracle_choice,
)


def _config(**sections: dict) -> EngineConfig:
    backend = {"max_retries": 2, "retry_backoff_s": 0.0, **sections.pop("backend", {})}
    return EngineConfig.model_validate({"backend": backend, **sections})


def test_two_turn_rollouts_emit_one_record_per_turn(config: EngineConfig) -> None:
    env = ToyEnvironment.from_config(config.grpo.environment, config.environment_seed)
    orchestrator = RolloutOrchestrator(config, ToyBackend(config, env=env))
    items = env.sample_items(50, "r")

    groups = orchestrator.rollout_batch(items, 2)

    rollouts = [rollout for group in groups for rollout in group.rollouts]
    assert len(rollouts) == 100  # noqa: PLR2004
    for rollout in rollouts:
        turns = [record.turn for record in rollout.records]
        assert turns == [Turn.BRANCH, Turn.RETHINK]
        assert all(record.item_id == rollout.item_id for record in rollout.records)
        assert all(len(record.tokens) == 1 for record in rollout.records)
    assert [group.item_id for group in groups] == [item.id for item in items]
    assert [r.rollout_index for r in groups[0].rollouts] == [0, 1]


def test_two_turn_full_conditions_the_rethink_on_the_branch(
    config: EngineConfig,
) -> None:
    backend = OracleBackend()
    orchestrator = RolloutOrchestrator(config, backend)

    rollout = orchestrator.rollout_two_turn(make_item("a", 2))

    assert backend.stages() == [Stage.BRANCH, Stage.RETHINK]
    assert "skips a step" in backend.requests[1].prompt
    assert backend.requests[1].metadata["selected"] == "2"
    assert rollout.trace.well_formed
    assert rollout.trace.verdict == 2  # noqa: PLR2004
    assert rollout.rewards.composite == 0.0
    assert [r.reward for r in rollout.records] == [0.0, 0.0]


def test_unconditioned_rethink_does_not_see_the_branch(config: EngineConfig) -> None:
    backend = OracleBackend()
    orchestrator = RolloutOrchestrator(config, backend)

    rollout = orchestrator.rollout_two_turn(
        make_item("a", 1), mode=PipelineMode.UNCONDITIONED_RETHINK
    )

    assert backend.stages() == [Stage.BRANCH, Stage.UNCONDITIONED]
    assert "skips a step" not in backend.requests[1].prompt
    assert rollout.trace.verdict == 1
    assert len(rollout.records) == 2  # noqa: PLR2004


def test_branching_only_reads_the_verdict_from_the_first_turn(
    config: EngineConfig,
) -> None:
    backend = OracleBackend()
    orchestrator = RolloutOrchestrator(config, backend)

    rollout = orchestrator.rollout_two_turn(
        make_item("a", 2), mode=PipelineMode.BRANCHING_ONLY
    )

    assert backend.stages() == [Stage.BRANCH_VERDICT]
    assert rollout.trace.well_formed
    assert rollout.trace.verdict == 2  # noqa: PLR2004
    assert rollout.trace.rethink_raw == ""
    assert [r.turn for r in rollout.records] == [Turn.BRANCH]


def test_single_turn_splits_one_generation(config: EngineConfig) -> None:
    backend = OracleBackend()
    orchestrator = RolloutOrchestrator(config, backend)

    rollout = orchestrator.rollout_two_turn(
        make_item("a", 1), mode=PipelineMode.SINGLE_TURN
    )

    assert backend.stages() == [Stage.SINGLE]
    assert rollout.trace.well_formed
    assert rollout.trace.verdict == 1
    assert rollout.trace.branch_raw.startswith("SELECTED:")
    assert [r.turn for r in rollout.records] == [Turn.RETHINK]


def test_malformed_branch_still_reaches_the_rethink(config: EngineConfig) -> None:
    backend = ScriptedBackend(oracle_choice, branch_text="I just like response 2.\n")
    orchestrator = RolloutOrchestrator(config, backend)

    rollout = orchestrator.rollout_two_turn(make_item("a", 2))

    assert backend.stages() == [Stage.BRANCH, Stage.RETHINK]
    assert "I just like response 2." in backend.requests[1].prompt
    assert backend.requests[1].metadata["selected"] == ""
    assert not rollout.trace.well_formed
    assert rollout.trace.branch_violations
    assert rollout.trace.verdict == 2  # noqa: PLR2004
    assert rollout.rewards.composite == -100.0  # noqa: PLR2004


def test_format_only_first_turn_rewards() -> None:
    config = _config(reward={"turn1_mode": "format_only"})
    orchestrator = RolloutOrchestrator(config, FlipBackend())

    rollout = orchestrator.rollout_two_turn(make_item("a", 1))

    assert [r.reward for r in rollout.records] == [0.0, -10.0]


def test_wrong_verdicts_are_rewarded_per_turn(config: EngineConfig) -> None:
    orchestrator = RolloutOrchestrator(config, FlipBackend())

    rollout = orchestrator.rollout_two_turn(make_item("a", 1))

    assert rollout.rewards.composite == -10.0  # noqa: PLR2004
    assert [r.reward for r in rollout.records] == [-10.0, -10.0]


def test_requests_carry_sampling_settings_and_stops() -> None:
    config = _config(rollout={"temperature": 0.6, "top_p": 0.9, "top_k": 5})
    backend = OracleBackend()

    RolloutOrchestrator(config, backend).rollout_two_turn(make_item("a", 1))

    branch, rethink = backend.requests
    assert (branch.temperature, branch.top_p, branch.top_k) == (0.6, 0.9, 5)
    assert branch.stop_strings == ("JUDGMENT:",)
    assert rethink.stop_strings == ("SELECTED:",)


def test_generate_truncates_at_the_first_stop() -> None:
    orchestrator = RolloutOrchestrator(
        _config(), CannedBackend("one two JUDGMENT: three SELECTED: four")
    )

    result = orchestrator.generate(
        GenerationRequest(prompt="p", stop_strings=("SELECTED:", "JUDGMENT:"))
    )

    assert result.text == "one two "
    assert result.token_count == 2  # noqa: PLR2004
    assert result.approximate
    assert not result.truncated


def test_generate_prefers_backend_token_counts_and_flags_caps() -> None:
    orchestrator = RolloutOrchestrator(_config(), CannedBackend("text", token_count=10))

    result = orchestrator.generate(
        GenerationRequest(prompt="p", max_new_tokens=10, max_total_tokens=20)
    )

    assert result.token_count == 10  # noqa: PLR2004
    assert not result.approximate
    assert result.truncated


def test_transient_failures_are_retried() -> None:
    flaky = FlakyBackend(CannedBackend("ok"), failures=2)
    orchestrator = RolloutOrchestrator(_config(), flaky)

    result = orchestrator.generate(GenerationRequest(prompt="p"))

    assert result.text == "ok"
    assert result.retry_count == 2  # noqa: PLR2004
    assert flaky.calls == 3  # noqa: PLR2004


def test_exhausted_retries_surface_as_unavailable() -> None:
    flaky = FlakyBackend(CannedBackend("ok"), failures=3)
    orchestrator = RolloutOrchestrator(_config(), flaky)

    with pytest.raises(BackendUnavailableError, match="after 3 attempts"):
        orchestrator.generate(GenerationRequest(prompt="p"))


def test_in_flight_requests_respect_the_cap() -> None:
    counting = CountingBackend(OracleBackend(), delay_s=0.005)
    orchestrator = RolloutOrchestrator(_config(backend={"max_concurrent": 3}), counting)

    rollouts = orchestrator.rollout_items([make_item(f"c-{i}", 1) for i in range(24)])

    assert len(rollouts) == 24  # noqa: PLR2004
    assert [r.item_id for r in rollouts] == [f"c-{i}" for i in range(24)]
    assert 1 <= counting.peak <= 3  # noqa: PLR2004


def test_backend_limit_lowers_the_cap(config: EngineConfig) -> None:
    backend = OracleBackend()
    backend.max_concurrent = 2

    assert RolloutOrchestrator(config, backend).max_concurrent == 2  # noqa: PLR2004


def test_groups_need_two_rollouts(config: EngineConfig) -> None:
    orchestrator = RolloutOrchestrator(config, OracleBackend())

    with pytest.raises(ValueError, match="K >= 2"):
        orchestrator.rollout_group(make_item("a", 1), 1)


def test_best_of_n_items_are_rejected(config: EngineConfig) -> None:
    orchestrator = RolloutOrchestrator(config, OracleBackend())

    with pytest.raises(ValueError, match="Best-of-N"):
        orchestrator.rollout_two_turn(make_bon_item("b", 3, 2))


def test_scaled_scores_need_a_verdict_turn() -> None:
    config = _config(
        reward={"variant": "scaled_score"}, rollout={"mode": "branching_only"}
    )

    with pytest.raises(ConfigError, match="reward.variant"):
        RolloutOrchestrator(config, OracleBackend())


def test_scaled_rollouts_reward_the_score_distance() -> None:
    scaled = _config(reward={"variant": "scaled_score"})
    orchestrator = RolloutOrchestrator(scaled, ScriptedBackend(lambda _: -2))

    rollout = orchestrator.rollout_two_turn(make_item("a", 2))

    assert rollout.trace.rethink.score == -2  # noqa: PLR2004
    assert rollout.rewards.composite == 0.0


def test_toy_rollouts_are_reproducible(config: EngineConfig) -> None:
    items = ToyEnvironment.from_config(
        config.grpo.environment, config.environment_seed
    ).sample_items(10, "d")

    def run() -> list[str]:
        orchestrator = RolloutOrchestrator(config, ToyBackend(config))
        groups = orchestrator.rollout_batch(items, 4, round_index=3)
        return [
            record.generated
            for group in groups
            for rollout in group.rollouts
            for record in rollout.records
        ]

    assert run() == run()


def test_canonical_record_order(config: EngineConfig) -> None:
    orchestrator = RolloutOrchestrator(config, OracleBackend())
    groups = orchestrator.rollout_batch([make_item("b", 1), make_item("a", 2)], 2)

    shuffled = [r for g in reversed(groups) for r in reversed(g.rollouts)]
    records = canonical_records(shuffled)

    keys = [(r.item_id, r.rollout_index, r.turn) for r in records]
    assert keys == [
        ("a", 0, Turn.BRANCH),
        ("a", 0, Turn.RETHINK),
        ("a", 1, Turn.BRANCH),
        ("a", 1, Turn.RETHINK),
        ("b", 0, Turn.BRANCH),
        ("b", 0, Turn.RETHINK),
        ("b", 1, Turn.BRANCH),
        ("b", 1, Turn.RETHINK),
    ]


def test_text_helpers() -> None:
    assert approximate_tokens("  a b\nc ") == 3  # noqa: PLR2004
    assert truncate_at_stop("abc", ["", "z"]) == "abc"
    assert truncate_at_stop("aXbY", ["Y", "X"]) == "a"
    assert BRANCH_TEXT.startswith("SELECTED:")
