# ruff: noqa: D100, D103, S101
import csv
import json
import math
from pathlib import Path

import pytest

from rethink_rm.criteria import DEFAULT_CRITERIA, CriteriaSet
from rethink_rm.diffusion import (
    UNATTRIBUTED,
    AllocationProfile,
    JudgeAttributor,
    LexiconAttributor,
    TraceText,
    allocation_profile,
    attribute_sentence,
    build_sentence_tokenizer,
    concentration_metrics,
    load_lexicon,
    segment_sentences,
    selection_frequencies,
    selection_frequencies_by_domain,
    strip_scaffolding,
    write_profile,
)
from rethink_rm.errors import ConfigError, DataIOError
from rethink_rm.model import DeliberationTrace, EngineConfig
from rethink_rm.orchestrator import RolloutOrchestrator
from rethink_rm.parsers import format_branch_turn, format_rethink_turn, parse_trace
from rethink_rm.toy import stable_hash
from tests.rethink_rm.mocks import BrokenForItems, ScriptedBackend, oracle_choice

LOGIC = "The proof skips one step and so the conclusion fails."
MATH = "The arithmetic gives a wrong sum at the final line."
LOGICAL_REASONING = 2
COMPUTATIONAL_PRECISION = 4


@pytest.fixture
def lexicon_attributor(config: EngineConfig) -> LexiconAttributor:
    return LexiconAttributor(config)


def _mixed_trace(criteria: CriteriaSet) -> DeliberationTrace:
    branch = format_branch_turn(
        ["Logical Reasoning", "Computational Precision"],
        " ".join([LOGIC] * 4),
        " ".join([LOGIC] * 3),
    )
    rethink = format_rethink_turn(" ".join([MATH] * 3), 2)
    return parse_trace(branch, rethink, criteria)


def _judge(config: EngineConfig, answer: str) -> JudgeAttributor:
    backend = ScriptedBackend(oracle_choice, attribution=answer)
    return JudgeAttributor(config, RolloutOrchestrator(config, backend))


def test_segmentation_splits_on_terminal_punctuation() -> None:
    assert segment_sentences("The sum is off. Is it? Yes!") == [
        ("The sum is off.", 4),
        ("Is it?", 2),
        ("Yes!", 1),
    ]
    assert segment_sentences("The step is wrong. Fix it") == [
        ("The step is wrong.", 4),
        ("Fix it", 2),
    ]


def test_segmentation_breaks_lines_and_skips_blanks() -> None:
    assert segment_sentences("") == []
    assert segment_sentences("  \n\n ") == []
    assert [s for s, _ in segment_sentences("first line\nsecond line")] == [
        "first line",
        "second line",
    ]


def test_segmentation_keeps_abbreviations_and_decimals() -> None:
    sentences = segment_sentences("Use a tool, e.g. a calculator. Pi is 3.14 here.")

    assert [s for s, _ in sentences] == [
        "Use a tool, e.g. a calculator.",
        "Pi is 3.14 here.",
    ]


def test_segmentation_keeps_abbreviated_dates_and_times() -> None:
    sentences = segment_sentences(
        "Dr. Smith paid at approx. 5 p.m. on Jan. 3. It worked."
    )

    assert sentences == [
        ("Dr. Smith paid at approx. 5 p.m. on Jan. 3.", 10),
        ("It worked.", 2),
    ]


def test_segmentation_with_a_custom_abbreviation_list() -> None:
    text = "Use the approx. value here."

    assert len(segment_sentences(text)) == 1
    tokenizer = build_sentence_tokenizer(["e.g."])
    assert [s for s, _ in segment_sentences(text, tokenizer)] == [
        "Use the approx.",
        "value here.",
    ]


def test_strip_scaffolding_keeps_only_prose(criteria: CriteriaSet) -> None:
    text = strip_scaffolding(_mixed_trace(criteria).text)

    assert "SELECTED:" not in text
    assert "ANALYSIS_1:" not in text
    assert "JUDGMENT:" not in text
    assert "\\boxed" not in text
    assert LOGIC in text
    assert MATH in text


def test_lexicon_attribution_examples(
    lexicon_attributor: LexiconAttributor, criteria: CriteriaSet
) -> None:
    def attribute(sentence: str) -> int | None:
        return attribute_sentence(sentence, criteria, lexicon_attributor)

    assert attribute("The proof contradicts itself.") == LOGICAL_REASONING
    assert attribute("The arithmetic is off by one.") == COMPUTATIONAL_PRECISION
    assert attribute("The function raises an exception.") == 3  # noqa: PLR2004
    assert attribute("It ignores the word limit.") == 5  # noqa: PLR2004
    assert attribute("Nice weather today.") is None


def test_lexicon_matches_whole_words_only(
    lexicon_attributor: LexiconAttributor, criteria: CriteriaSet
) -> None:
    assert attribute_sentence("A factory opened.", criteria, lexicon_attributor) is None
    assert (
        attribute_sentence("One test  case fails.", criteria, lexicon_attributor) == 3  # noqa: PLR2004
    )


def test_lexicon_ties_go_to_the_lower_id(
    lexicon_attributor: LexiconAttributor, criteria: CriteriaSet
) -> None:
    sentence = "That fact defeats the logic."
    assert attribute_sentence(sentence, criteria, lexicon_attributor) == 1


def test_custom_lexicon_overrides_the_packaged_one(
    config: EngineConfig, criteria: CriteriaSet
) -> None:
    attributor = LexiconAttributor(config, lexicon={"writing clarity": ["Banana"]})

    assert attribute_sentence("banana split", criteria, attributor) == 6  # noqa: PLR2004
    assert attribute_sentence("The proof fails.", criteria, attributor) is None


def test_load_lexicon(tmp_path: Path) -> None:
    packaged = load_lexicon()
    assert set(packaged) == {name.lower() for name, _ in DEFAULT_CRITERIA}

    good = tmp_path / "lexicon.json"
    good.write_text(json.dumps({"Logical Reasoning": ["Proof"]}), encoding="utf-8")
    assert load_lexicon(good) == {"logical reasoning": ("proof",)}

    with pytest.raises(DataIOError, match="Cannot read lexicon"):
        load_lexicon(tmp_path / "missing.json")

    broken = tmp_path / "broken.json"
    broken.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_lexicon(broken)

    wrong_shape = tmp_path / "shape.json"
    wrong_shape.write_text(json.dumps({"Logical Reasoning": "proof"}), encoding="utf-8")
    with pytest.raises(ConfigError, match="map criterion names"):
        load_lexicon(wrong_shape)

    blank = tmp_path / "blank.json"
    blank.write_text(json.dumps({"Logical Reasoning": ["  "]}), encoding="utf-8")
    with pytest.raises(ConfigError, match="blank keyword"):
        load_lexicon(blank)


def test_constructed_trace_profile(
    lexicon_attributor: LexiconAttributor, criteria: CriteriaSet
) -> None:
    profile = allocation_profile([_mixed_trace(criteria)], criteria, lexicon_attributor)

    assert profile.shares[LOGICAL_REASONING] == pytest.approx(0.7, abs=0.02)
    assert profile.shares[COMPUTATIONAL_PRECISION] == pytest.approx(0.3, abs=0.02)
    assert profile.unattributed == pytest.approx(0.0, abs=0.02)
    assert sum(profile.shares.values()) + profile.unattributed == pytest.approx(1.0)
    assert profile.total_tokens == 100  # noqa: PLR2004
    assert profile.approximate_counts


def test_profiles_average_per_trace_shares(
    lexicon_attributor: LexiconAttributor, criteria: CriteriaSet
) -> None:
    profile = allocation_profile(
        [LOGIC, " ".join([MATH] * 5)], criteria, lexicon_attributor
    )

    assert profile.shares[LOGICAL_REASONING] == pytest.approx(0.5)
    assert profile.shares[COMPUTATIONAL_PRECISION] == pytest.approx(0.5)
    assert profile.n_traces == 2  # noqa: PLR2004


def test_empty_traces_count_as_unattributed(
    lexicon_attributor: LexiconAttributor, criteria: CriteriaSet
) -> None:
    profile = allocation_profile(["", LOGIC], criteria, lexicon_attributor)

    assert profile.unattributed == pytest.approx(0.5)
    assert profile.shares[LOGICAL_REASONING] == pytest.approx(0.5)
    with pytest.raises(ValueError, match="at least one trace"):
        allocation_profile([], criteria, lexicon_attributor)


def test_backend_token_counts_rescale_token_totals(
    lexicon_attributor: LexiconAttributor, criteria: CriteriaSet
) -> None:
    text = strip_scaffolding(_mixed_trace(criteria).text)

    profile = allocation_profile(
        [TraceText(text, token_count=200)], criteria, lexicon_attributor
    )

    assert not profile.approximate_counts
    assert profile.total_tokens == 200  # noqa: PLR2004
    assert profile.token_counts[LOGICAL_REASONING] == 140  # noqa: PLR2004
    assert profile.token_counts[COMPUTATIONAL_PRECISION] == 60  # noqa: PLR2004
    assert profile.shares[LOGICAL_REASONING] == pytest.approx(0.7)


def test_profiles_are_equivariant_under_criterion_order(
    lexicon_attributor: LexiconAttributor, criteria: CriteriaSet
) -> None:
    reordered = CriteriaSet.from_pairs(reversed(DEFAULT_CRITERIA))
    traces = [_mixed_trace(criteria).text, "The code has a bug. It is unsafe."]

    original = allocation_profile(traces, criteria, lexicon_attributor)
    permuted = allocation_profile(traces, reordered, lexicon_attributor)

    for criterion in criteria:
        twin = reordered.lookup(criterion.name)
        assert twin is not None
        assert permuted.shares[twin.id] == pytest.approx(original.shares[criterion.id])
    assert permuted.unattributed == pytest.approx(original.unattributed)


def test_uniform_profile_has_maximal_entropy() -> None:
    profile = AllocationProfile(
        shares=dict.fromkeys(range(1, 10), 1 / 9),
        unattributed=0.0,
        total_tokens=90,
        approximate_counts=True,
    )

    metrics = concentration_metrics(profile, 2)

    assert metrics.entropy == pytest.approx(math.log(9), abs=1e-6)
    assert metrics.top_k_share == pytest.approx(2 / 9)


def test_concentrated_profile_metrics() -> None:
    profile = AllocationProfile(
        shares={1: 0.0, 2: 0.6, 3: 0.2},
        unattributed=0.2,
        total_tokens=10,
        approximate_counts=True,
    )

    metrics = concentration_metrics(profile, 1)

    assert metrics.top_k_share == pytest.approx(0.6)
    expected = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
    assert metrics.entropy == pytest.approx(expected)
    assert concentration_metrics(
        AllocationProfile({1: 0.0}, 1.0, 0, True), 1
    ).entropy == 0.0
    with pytest.raises(ValueError, match="k must be at least 1"):
        concentration_metrics(profile, 0)


def test_judge_attribution(config: EngineConfig, criteria: CriteriaSet) -> None:
    assert _judge(config, "DIMENSION: Writing Clarity").attribute(
        "It reads well.", criteria
    ).criterion_id == 6  # noqa: PLR2004
    assert _judge(config, "DIMENSION: NONE").attribute("Hi.", criteria).note is None

    unknown = _judge(config, "DIMENSION: Vibes").attribute("Hi.", criteria)
    assert unknown.criterion_id is None
    assert "unknown dimension" in (unknown.note or "")

    silent = _judge(config, "I think clarity.").attribute("Hi.", criteria)
    assert silent.note == "answer has no DIMENSION line"


def test_judge_attribution_failures_are_noted(
    config: EngineConfig, criteria: CriteriaSet
) -> None:
    sentence = "It reads well."
    backend = BrokenForItems(
        ScriptedBackend(oracle_choice, attribution="DIMENSION: Writing Clarity"),
        [f"sentence-{stable_hash(sentence)}"],
    )
    attributor = JudgeAttributor(config, RolloutOrchestrator(config, backend))

    results = attributor.attribute_many([sentence, "Another one."], criteria)

    assert results[0].criterion_id is None
    assert "backend failure" in (results[0].note or "")
    assert results[1].criterion_id == 6  # noqa: PLR2004


def test_judge_attributor_needs_a_backend(config: EngineConfig) -> None:
    with pytest.raises(ConfigError, match="needs a generation backend"):
        JudgeAttributor(config)


def test_judge_profiles_use_the_model_answers(
    config: EngineConfig, criteria: CriteriaSet
) -> None:
    attributor = _judge(config, "DIMENSION: Intent Alignment")

    profile = allocation_profile(["One. Two. Three."], criteria, attributor)

    assert profile.shares[9] == pytest.approx(1.0)


def test_selection_frequencies(
    criteria: CriteriaSet,
    correct_trace: DeliberationTrace,
    wrong_trace: DeliberationTrace,
    malformed_trace: DeliberationTrace,
) -> None:
    frequencies = selection_frequencies(
        [correct_trace, wrong_trace, malformed_trace], criteria
    )

    assert frequencies["Logical Reasoning"] == 1.0
    assert frequencies["Computational Precision"] == 1.0
    assert frequencies["Writing Clarity"] == 0.0
    assert list(frequencies) == list(criteria.names)
    assert set(selection_frequencies([malformed_trace], criteria).values()) == {0.0}


def test_selection_frequencies_by_domain(
    criteria: CriteriaSet, correct_trace: DeliberationTrace
) -> None:
    grouped = selection_frequencies_by_domain(
        [correct_trace, correct_trace], ["math", None], criteria
    )

    assert list(grouped) == ["math"]
    with pytest.raises(ValueError, match="domain entry"):
        selection_frequencies_by_domain([correct_trace], [], criteria)


def test_write_profile(
    tmp_path: Path,
    config: EngineConfig,
    criteria: CriteriaSet,
    lexicon_attributor: LexiconAttributor,
) -> None:
    profile = allocation_profile([_mixed_trace(criteria)], criteria, lexicon_attributor)
    metrics = concentration_metrics(profile, 2)

    csv_path, json_path = write_profile(
        tmp_path,
        "traces",
        profile,
        metrics,
        criteria,
        config,
        {"Logical Reasoning": 1.0},
    )

    assert csv_path.name == "traces.profile.csv"
    assert json_path.name == "traces.summary.json"
    with csv_path.open(encoding="utf-8", newline="") as file:
        rows = list(csv.reader(file))
    assert rows[0] == ["name", "share", "token_count"]
    assert rows[2] == ["Logical Reasoning", "0.700000", "70"]
    assert rows[-1][0] == UNATTRIBUTED
    assert len(rows) == 1 + len(criteria) + 1
    assert (tmp_path / "traces.profile.csv.meta.json").exists()

    summary = json.loads(json_path.read_text(encoding="utf-8"))
    assert summary["shares"]["Logical Reasoning"] == pytest.approx(0.7)
    assert summary["top_k_share"] == pytest.approx(1.0)
    assert summary["selection_frequencies"] == {"Logical Reasoning": 1.0}
    assert summary["config"]["seed"] == config.seed
    assert set(summary["metadata"]) == {"engine_version", "created_at"}
