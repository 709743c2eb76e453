"""
Token-allocation analysis of judge traces.

Every sentence of a trace is attributed to at most one evaluation dimension;
the share of tokens each dimension receives, averaged over traces, shows
whether a judge concentrates on a few dimensions or spreads thinly over many.
"""

import json
import math
import re
from abc import ABC, abstractmethod
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from loguru import logger
from nltk.tokenize.punkt import PunktParameters, PunktSentenceTokenizer

from rethink_rm.criteria import CriteriaSet, normalize_name
from rethink_rm.errors import BackendError, ConfigError, DataIOError
from rethink_rm.fileutils import build_artifact_path, write_csv, write_json
from rethink_rm.model import DeliberationTrace, EngineConfig, Stage
from rethink_rm.orchestrator import RolloutOrchestrator
from rethink_rm.parsers import find_boxed
from rethink_rm.prompts import (
    ANALYSIS_1_ANCHOR,
    ANALYSIS_2_ANCHOR,
    JUDGMENT_ANCHOR,
    SELECTED_ANCHOR,
    render_attribution_prompt,
)
from rethink_rm.toy import stable_hash

# Lower case, without the final period. Words that often end a sentence
# ("no", "max") are left out.
ABBREVIATIONS = frozenset(
    (
        "e.g i.e etc vs cf al approx ca fig figs eq eqs vol pp mr mrs ms dr "
        "prof jr sr inc ltd a.m p.m jan feb apr jul aug sep sept oct nov dec "
        "resp incl"
    ).split()
)
UNATTRIBUTED = "unattributed"
_DIMENSION_LINE = re.compile(r"^\s*DIMENSION:\s*(.+?)\s*$", re.MULTILINE)


# --- segmentation --------------------------------------------------------------


def build_sentence_tokenizer(
    abbreviations: Iterable[str] = ABBREVIATIONS,
) -> PunktSentenceTokenizer:
    """Build an untrained Punkt tokenizer that knows `abbreviations`."""
    params = PunktParameters()
    params.abbrev_types = {a.lower().rstrip(".") for a in abbreviations}
    return PunktSentenceTokenizer(params)


_SENTENCE_TOKENIZER = build_sentence_tokenizer()


def segment_sentences(
    text: str, tokenizer: PunktSentenceTokenizer | None = None
) -> list[tuple[str, int]]:
    """
    Split text into sentences, line by line, with a Punkt tokenizer.

    A period after a known abbreviation ("e.g.", "approx.", "Jan.") does not
    end a sentence. Token counts are whitespace-approximated.

    Args:
        text: The text to split.
        tokenizer: Tokenizer to use; defaults to one built from `ABBREVIATIONS`.

    Returns:
        `(sentence, token_count)` pairs in order; empty for blank text.
    """
    tokenizer = tokenizer or _SENTENCE_TOKENIZER
    sentences: list[tuple[str, int]] = []
    for line in text.splitlines():
        if line.strip():
            for sentence in tokenizer.tokenize(line):
                _append(sentences, sentence)
    return sentences


def _append(sentences: list[tuple[str, int]], fragment: str) -> None:
    sentence = fragment.strip()
    if sentence:
        sentences.append((sentence, len(sentence.split())))


def strip_scaffolding(text: str) -> str:
    """
    Remove trace scaffolding that carries no analysis.

    Drops the selection line, the anchor labels and boxed verdicts, keeping the
    prose that follows each anchor.
    """
    for start, end, _ in reversed(find_boxed(text)):
        text = text[:start] + text[end:]

    kept = []
    for line in text.splitlines():
        stripped = line.lstrip()
        if stripped.startswith(SELECTED_ANCHOR) or stripped.startswith("```"):
            continue
        for anchor in (ANALYSIS_1_ANCHOR, ANALYSIS_2_ANCHOR, JUDGMENT_ANCHOR):
            if stripped.startswith(anchor):
                stripped = stripped.removeprefix(anchor)
                break
        kept.append(stripped)
    return "\n".join(kept)


# --- attribution ---------------------------------------------------------------


@dataclass(frozen=True)
class Attribution:
    """
    Where one sentence was attributed.

    Attributes:
        criterion_id: The dimension, or `None` when unattributed.
        note: Why attribution failed, for degraded paths.
    """

    criterion_id: int | None
    note: str | None = None


class Attributor(ABC):
    """Base class for sentence attributors."""

    def __init__(
        self, config: EngineConfig, orchestrator: RolloutOrchestrator | None = None
    ) -> None:
        """
        Instantiate an `Attributor`.

        Args:
          config: The engine configuration.
          orchestrator: Generation path, for attributors that ask a model.
        """
        self.config = config
        self.orchestrator = orchestrator

    @abstractmethod
    def attribute(self, sentence: str, criteria: CriteriaSet) -> Attribution:
        """Attribute one sentence to a criterion of `criteria`, or to none."""

    def attribute_many(
        self, sentences: Sequence[str], criteria: CriteriaSet
    ) -> list[Attribution]:
        """Attribute several sentences, in order."""
        return [self.attribute(sentence, criteria) for sentence in sentences]


def load_lexicon(path: str | Path | None = None) -> dict[str, tuple[str, ...]]:
    """
    Load a lexicon file mapping criterion names to keyword lists.

    Args:
        path: The JSON file; `None` loads the packaged lexicon.

    Returns:
        Keywords per normalized criterion name, lowercased.

    Raises:
        DataIOError: If the file cannot be read.
        ConfigError: If the file is not a mapping of names to keyword lists, or
          a keyword is blank.
    """
    try:
        if path is None:
            raw = (
                resources.files("rethink_rm")
                .joinpath("data", "lexicon.json")
                .read_text(encoding="utf-8")
            )
        else:
            raw = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        msg = f"Cannot read lexicon {path}: {e}"
        raise DataIOError(msg) from e

    try:
        data = json.loads(raw)
    except json.JSONDecodeError as e:
        msg = f"Lexicon {path or 'lexicon.json'} is not valid JSON: {e}"
        raise ConfigError(msg) from e
    if not isinstance(data, dict) or not all(
        isinstance(words, list) and all(isinstance(w, str) for w in words)
        for words in data.values()
    ):
        msg = "A lexicon must map criterion names to lists of keywords."
        raise ConfigError(msg)

    lexicon: dict[str, tuple[str, ...]] = {}
    for name, words in data.items():
        keywords = tuple(normalize_name(word) for word in words)
        if not all(keywords):
            msg = f"Lexicon entry {name!r} has a blank keyword."
            raise ConfigError(msg)
        lexicon[normalize_name(name)] = keywords
    return lexicon


def _keyword_pattern(keywords: Sequence[str]) -> re.Pattern[str]:
    alternatives = [re.escape(word).replace(r"\ ", r"\s+") for word in keywords]
    return re.compile(
        r"(?<![\w-])(?:" + "|".join(alternatives) + r")(?![\w-])", re.IGNORECASE
    )


class LexiconAttributor(Attributor):
    """Attributes a sentence to the criterion whose keywords it hits most often."""

    def __init__(
        self,
        config: EngineConfig,
        orchestrator: RolloutOrchestrator | None = None,
        lexicon: Mapping[str, Sequence[str]] | None = None,
    ) -> None:
        """
        Instantiate a `LexiconAttributor`.

        Args:
          config: The engine configuration; `analyzer.lexicon_path` names the
            lexicon file.
          orchestrator: Unused.
          lexicon: Keywords per criterion name, overriding the file.
        """
        super().__init__(config, orchestrator)
        if lexicon is None:
            self.lexicon = load_lexicon(config.analyzer.lexicon_path)
        else:
            self.lexicon = {
                normalize_name(name): tuple(normalize_name(w) for w in words)
                for name, words in lexicon.items()
            }
        self._patterns: dict[tuple[str, ...], list[tuple[int, re.Pattern[str]]]] = {}

    def _compiled(self, criteria: CriteriaSet) -> list[tuple[int, re.Pattern[str]]]:
        key = criteria.names
        if key not in self._patterns:
            compiled = []
            for criterion in criteria:
                keywords = self.lexicon.get(normalize_name(criterion.name))
                if keywords:
                    compiled.append((criterion.id, _keyword_pattern(keywords)))
                else:
                    logger.warning(
                        "No lexicon keywords for criterion {name}", name=criterion.name
                    )
            self._patterns[key] = compiled
        return self._patterns[key]

    def attribute(self, sentence: str, criteria: CriteriaSet) -> Attribution:
        """
        Attribute `sentence` by keyword hits.

        The criterion with the most hits wins; ties go to the lower id and zero
        hits leave the sentence unattributed.
        """
        best_id, best_hits = None, 0
        for criterion_id, pattern in self._compiled(criteria):
            hits = len(pattern.findall(sentence))
            if hits > best_hits:
                best_id, best_hits = criterion_id, hits
        return Attribution(best_id)


class JudgeAttributor(Attributor):
    """Asks a model which dimension each sentence serves."""

    def __init__(
        self, config: EngineConfig, orchestrator: RolloutOrchestrator | None = None
    ) -> None:
        """
        Instantiate a `JudgeAttributor`.

        Args:
          config: The engine configuration.
          orchestrator: Generation path for the classification prompts.

        Raises:
          ConfigError: If no orchestrator is given.
        """
        if orchestrator is None:
            msg = "The external_judge attributor needs a generation backend."
            raise ConfigError(msg)
        super().__init__(config, orchestrator)
        self._orchestrator = orchestrator

    def attribute(self, sentence: str, criteria: CriteriaSet) -> Attribution:
        """
        Attribute `sentence` from the model's `DIMENSION:` answer.

        Backend failures and unparseable answers leave the sentence
        unattributed with a note; they never abort the analysis.
        """
        request = self._orchestrator.build_request(
            render_attribution_prompt(sentence, criteria),
            Stage.ATTRIBUTION,
            (),
            {"item_id": f"sentence-{stable_hash(sentence)}"},
        )
        try:
            answer = self._orchestrator.generate(request).text
        except BackendError as e:
            logger.warning("Attribution request failed: {error}", error=str(e))
            return Attribution(None, note=f"backend failure: {e}")

        match = _DIMENSION_LINE.search(answer)
        if match is None:
            return Attribution(None, note="answer has no DIMENSION line")
        name = match.group(1)
        if name.upper() == "NONE":
            return Attribution(None)
        criterion = criteria.lookup(name)
        if criterion is None:
            return Attribution(None, note=f"unknown dimension {name!r}")
        return Attribution(criterion.id)

    def attribute_many(
        self, sentences: Sequence[str], criteria: CriteriaSet
    ) -> list[Attribution]:
        """Attribute several sentences concurrently, in order."""
        with ThreadPoolExecutor(max_workers=self._orchestrator.max_concurrent) as pool:
            return list(pool.map(lambda s: self.attribute(s, criteria), sentences))


def attribute_sentence(
    sentence: str, criteria: CriteriaSet, attributor: Attributor
) -> int | None:
    """Return the criterion id `sentence` is attributed to, or `None`."""
    if len(criteria) == 0:
        msg = "Attribution needs at least one criterion."
        raise ValueError(msg)
    return attributor.attribute(sentence, criteria).criterion_id


# --- profiles ------------------------------------------------------------------


@dataclass(frozen=True)
class TraceText:
    """
    The text of one trace to analyze.

    Attributes:
        text: Both turns of the trace, concatenated.
        token_count: Backend-reported token count, when known.
    """

    text: str
    token_count: int | None = None


@dataclass(frozen=True)
class AllocationProfile:
    """
    Average share of trace tokens spent on each dimension.

    Attributes:
        shares: Share per criterion id, zero included.
        unattributed: Share of tokens no dimension claimed.
        total_tokens: Tokens over all traces.
        approximate_counts: Whether any trace's count was whitespace-approximated.
        n_traces: Number of traces averaged.
        token_counts: Tokens per criterion id over all traces.
        unattributed_tokens: Unattributed tokens over all traces.
    """

    shares: dict[int, float]
    unattributed: float
    total_tokens: int
    approximate_counts: bool
    n_traces: int = 0
    token_counts: dict[int, int] = field(default_factory=dict)
    unattributed_tokens: int = 0


def _as_trace_text(trace: DeliberationTrace | TraceText | str) -> TraceText:
    if isinstance(trace, TraceText):
        return trace
    if isinstance(trace, DeliberationTrace):
        return TraceText(trace.text)
    return TraceText(trace)


def allocation_profile(
    traces: Sequence[DeliberationTrace | TraceText | str],
    criteria: CriteriaSet,
    attributor: Attributor,
) -> AllocationProfile:
    """
    Compute the average per-dimension token share of a set of traces.

    Each trace's shares are taken over the tokens of both turns, then averaged
    uniformly across traces. A trace with no tokens counts as fully
    unattributed.

    Args:
        traces: The traces.
        criteria: The dimensions to attribute to.
        attributor: How sentences are attributed.

    Returns:
        The averaged profile.

    Raises:
        ValueError: If `traces` is empty.
    """
    if not traces:
        msg = "allocation_profile needs at least one trace."
        raise ValueError(msg)

    texts = [_as_trace_text(trace) for trace in traces]
    segmented = [segment_sentences(strip_scaffolding(t.text)) for t in texts]
    unique = list(dict.fromkeys(s for sentences in segmented for s, _ in sentences))
    labels = attributor.attribute_many(unique, criteria)
    attributions = dict(zip(unique, labels, strict=True))
    notes = Counter(a.note for a in attributions.values() if a.note)
    for note, count in notes.items():
        logger.warning("{count} sentences unattributed: {note}", count=count, note=note)

    share_sums = dict.fromkeys(criteria.ids, 0.0)
    unattributed_sum = 0.0
    token_counts = dict.fromkeys(criteria.ids, 0.0)
    unattributed_tokens = 0.0
    total_tokens = 0
    for text, sentences in zip(texts, segmented, strict=True):
        counts: Counter[int | None] = Counter()
        for sentence, n_tokens in sentences:
            counts[attributions[sentence].criterion_id] += n_tokens
        approx_total = sum(counts.values())
        trace_total = text.token_count if text.token_count is not None else approx_total
        total_tokens += trace_total
        if approx_total == 0:
            unattributed_sum += 1.0
            unattributed_tokens += trace_total
            continue
        scale = trace_total / approx_total
        for criterion_id, n_tokens in counts.items():
            if criterion_id is None:
                unattributed_sum += n_tokens / approx_total
                unattributed_tokens += n_tokens * scale
            else:
                share_sums[criterion_id] += n_tokens / approx_total
                token_counts[criterion_id] += n_tokens * scale

    n = len(texts)
    profile = AllocationProfile(
        shares={cid: total / n for cid, total in share_sums.items()},
        unattributed=unattributed_sum / n,
        total_tokens=total_tokens,
        approximate_counts=any(t.token_count is None for t in texts),
        n_traces=n,
        token_counts={cid: round(count) for cid, count in token_counts.items()},
        unattributed_tokens=round(unattributed_tokens),
    )
    logger.info(
        "Profiled {n} traces ({tokens} tokens, {unattributed:.1%} unattributed)",
        n=n,
        tokens=total_tokens,
        unattributed=profile.unattributed,
    )
    return profile


@dataclass(frozen=True)
class ConcentrationMetrics:
    """
    How concentrated a profile is.

    Attributes:
        k: Number of top dimensions summed.
        top_k_share: Sum of the k largest dimension shares.
        entropy: Natural-log entropy of the attributed shares, renormalized.
    """

    k: int
    top_k_share: float
    entropy: float


def concentration_metrics(profile: AllocationProfile, k: int) -> ConcentrationMetrics:
    """
    Summarize how strongly a profile focuses on few dimensions.

    Args:
        profile: The profile.
        k: How many of the largest shares to sum.

    Returns:
        The top-k share and the entropy over nonzero attributed shares.

    Raises:
        ValueError: If `k` is below 1.
    """
    if k < 1:
        msg = f"k must be at least 1, got {k}."
        raise ValueError(msg)

    ranked = sorted(profile.shares.values(), reverse=True)
    attributed = sum(ranked)
    entropy = 0.0
    if attributed > 0:
        entropy = -sum(
            (s / attributed) * math.log(s / attributed) for s in ranked if s > 0
        )
    return ConcentrationMetrics(
        k=k, top_k_share=sum(ranked[:k]), entropy=max(entropy, 0.0)
    )


def selection_frequencies(
    traces: Sequence[DeliberationTrace], criteria: CriteriaSet
) -> dict[str, float]:
    """
    Fraction of well-formed traces whose first turn selected each criterion.

    Args:
        traces: The traces; malformed ones are skipped.
        criteria: The criteria to report, by name.

    Returns:
        Frequency per criterion name, in id order; all zero when no trace is
        well-formed.
    """
    selected = [
        trace.branch.selected
        for trace in traces
        if trace.well_formed and trace.branch is not None
    ]
    counts = Counter(cid for ids in selected for cid in ids)
    return {
        c.name: (counts[c.id] / len(selected) if selected else 0.0) for c in criteria
    }


def selection_frequencies_by_domain(
    traces: Sequence[DeliberationTrace],
    domains: Sequence[str | None],
    criteria: CriteriaSet,
) -> dict[str, dict[str, float]]:
    """Selection frequencies per domain tag; untagged traces are left out."""
    if len(traces) != len(domains):
        msg = "Every trace needs a domain entry."
        raise ValueError(msg)
    grouped: dict[str, list[DeliberationTrace]] = {}
    for trace, domain in zip(traces, domains, strict=True):
        if domain is not None:
            grouped.setdefault(domain, []).append(trace)
    return {
        domain: selection_frequencies(grouped[domain], criteria)
        for domain in sorted(grouped)
    }


# --- artifacts -----------------------------------------------------------------

PROFILE_HEADER = ("name", "share", "token_count")


def profile_rows(
    profile: AllocationProfile, criteria: CriteriaSet
) -> list[tuple[str, str, int]]:
    """CSV rows of a profile: one per dimension, then the unattributed row."""
    rows = [
        (c.name, f"{profile.shares[c.id]:.6f}", profile.token_counts.get(c.id, 0))
        for c in criteria
    ]
    rows.append(
        (UNATTRIBUTED, f"{profile.unattributed:.6f}", profile.unattributed_tokens)
    )
    return rows


def profile_summary(
    profile: AllocationProfile,
    metrics: ConcentrationMetrics,
    criteria: CriteriaSet,
    selection: Mapping[str, float] | None = None,
) -> dict[str, Any]:
    """Build the JSON summary body of an analysis run."""
    return {
        "n_traces": profile.n_traces,
        "total_tokens": profile.total_tokens,
        "approximate_counts": profile.approximate_counts,
        "shares": {c.name: profile.shares[c.id] for c in criteria},
        UNATTRIBUTED: profile.unattributed,
        "top_k": metrics.k,
        "top_k_share": metrics.top_k_share,
        "entropy": metrics.entropy,
        "selection_frequencies": dict(selection or {}),
    }


def write_profile(  # noqa: PLR0913
    out_dir: str | Path,
    name: str,
    profile: AllocationProfile,
    metrics: ConcentrationMetrics,
    criteria: CriteriaSet,
    config: EngineConfig,
    selection: Mapping[str, float] | None = None,
) -> tuple[Path, Path]:
    """
    Write the per-dimension CSV and the JSON summary of an analysis run.

    Returns:
        The CSV path and the summary path.
    """
    csv_path = write_csv(
        build_artifact_path(out_dir, name, "csv", tag="profile"),
        PROFILE_HEADER,
        profile_rows(profile, criteria),
        config,
    )
    json_path = write_json(
        build_artifact_path(out_dir, name, "json", tag="summary"),
        profile_summary(profile, metrics, criteria, selection),
        config,
    )
    return csv_path, json_path
