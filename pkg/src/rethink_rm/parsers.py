"""
Parsers that turn raw judgment turns into structured traces.

Sections are found by line anchors (`SELECTED:`, `ANALYSIS_1:`, `ANALYSIS_2:`,
`JUDGMENT:`) written at the start of a line and outside any backtick fence.
Parsers are total: any text yields either a trace or a `MalformedTurn` carrying
every violation found.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass

from rethink_rm.criteria import MAX_SELECTED, MIN_SELECTED, CriteriaSet, normalize_name
from rethink_rm.fencing import fenced_line_mask
from rethink_rm.model import (
    BranchTrace,
    DeliberationTrace,
    FormatViolation,
    MalformedTurn,
    RethinkTrace,
    ViolationCode,
)
from rethink_rm.prompts import (
    ANALYSIS_1_ANCHOR,
    ANALYSIS_2_ANCHOR,
    JUDGMENT_ANCHOR,
    SELECTED_ANCHOR,
)

BOXED_PREFIX = "\\boxed{"
SCALED_MIN = -3
SCALED_MAX = 3


def scan_boxed(text: str) -> tuple[list[tuple[int, int, str]], list[int]]:
    """
    Find every `\\boxed{...}` marker, honouring nested braces.

    Scanning continues past a marker whose braces never close, so later
    markers are still found.

    Args:
        text: The text to scan.

    Returns:
        `(start, end, content)` for each complete marker, and the start of
        each unclosed marker, both in order of appearance.
    """
    found = []
    unclosed = []
    start = text.find(BOXED_PREFIX)
    while start >= 0:
        depth = 0
        end = None
        for i in range(start + len(BOXED_PREFIX) - 1, len(text)):
            if text[i] == "{":
                depth += 1
            elif text[i] == "}":
                depth -= 1
                if depth == 0:
                    end = i + 1
                    break
        if end is None:
            unclosed.append(start)
            start = text.find(BOXED_PREFIX, start + len(BOXED_PREFIX))
            continue
        found.append((start, end, text[start + len(BOXED_PREFIX) : end - 1]))
        start = text.find(BOXED_PREFIX, end)
    return found, unclosed


def find_boxed(text: str) -> list[tuple[int, int, str]]:
    """Complete `\\boxed{...}` markers of `text`; see `scan_boxed`."""
    return scan_boxed(text)[0]


@dataclass(frozen=True)
class _Section:
    line: int
    inline: str


class _AnchoredText:
    """A turn split into lines, with the unfenced anchor positions indexed."""

    def __init__(self, raw: str) -> None:
        self.lines = raw.splitlines()
        self.fenced = fenced_line_mask(self.lines)

    def find(self, anchor: str) -> _Section | None:
        """Locate the first unfenced line that starts with `anchor`."""
        for index, line in enumerate(self.lines):
            if not self.fenced[index] and line.startswith(anchor):
                return _Section(line=index, inline=line[len(anchor) :])
        return None

    def block(self, section: _Section, end_line: int | None) -> str:
        """Return the text of `section` up to (not including) `end_line`."""
        body = [section.inline, *self.lines[section.line + 1 : end_line]]
        return "\n".join(body).strip()

    def unfenced_text(self, start_line: int, inline: str) -> str:
        """Join the unfenced text from an anchor line onwards."""
        kept = [inline] + [
            line
            for index, line in enumerate(self.lines[start_line + 1 :], start_line + 1)
            if not self.fenced[index]
        ]
        return "\n".join(kept)


class TurnParser(ABC):
    """Abstract base class defining the functionality supporting turn parsing."""

    @abstractmethod
    def parse(self, raw: str) -> BranchTrace | RethinkTrace | MalformedTurn:
        """
        Parse one raw turn.

        Args:
          raw: The complete text generated for the turn.

        Returns:
          The structured turn, or a `MalformedTurn` listing every violation.
        """
        ...


class BranchParser(TurnParser):
    """Parses the adaptive-branching turn against a criteria set."""

    def __init__(self, criteria: CriteriaSet) -> None:
        """
        Instantiate a `BranchParser`.

        Args:
          criteria: The criteria selected names are resolved against.
        """
        self.criteria = criteria

    def _parse_selection(
        self, text: _AnchoredText, violations: list[FormatViolation]
    ) -> tuple[int, ...]:
        selected = text.find(SELECTED_ANCHOR)
        if selected is None:
            violations.append(
                FormatViolation(
                    ViolationCode.MISSING_SECTION, f"no {SELECTED_ANCHOR} line"
                )
            )
            return ()

        names: dict[str, str] = {}
        for part in selected.inline.split(","):
            name = part.strip()
            if name:
                names.setdefault(normalize_name(name), name)

        if not MIN_SELECTED <= len(names) <= MAX_SELECTED:
            violations.append(
                FormatViolation(
                    ViolationCode.CRITERIA_COUNT_OUT_OF_RANGE,
                    f"selected {len(names)} criteria, expected "
                    f"{MIN_SELECTED} to {MAX_SELECTED}",
                )
            )

        ids = []
        for name in names.values():
            criterion = self.criteria.lookup(name)
            if criterion is None:
                violations.append(
                    FormatViolation(
                        ViolationCode.UNKNOWN_CRITERION, f"unknown criterion {name!r}"
                    )
                )
            else:
                ids.append(criterion.id)
        return tuple(ids)

    def parse(self, raw: str) -> BranchTrace | MalformedTurn:
        """
        Parse a first turn.

        Args:
          raw: The complete first-turn text.

        Returns:
          A `BranchTrace` on success, else a `MalformedTurn`.
        """
        text = _AnchoredText(raw)
        violations: list[FormatViolation] = []
        selected = self._parse_selection(text, violations)

        first = text.find(ANALYSIS_1_ANCHOR)
        second = text.find(ANALYSIS_2_ANCHOR)
        analysis_1 = analysis_2 = ""
        sections = ((ANALYSIS_1_ANCHOR, first), (ANALYSIS_2_ANCHOR, second))
        for anchor, section in sections:
            if section is None:
                violations.append(
                    FormatViolation(ViolationCode.MISSING_SECTION, f"no {anchor} block")
                )

        if first is not None and second is not None:
            if second.line <= first.line:
                violations.append(
                    FormatViolation(
                        ViolationCode.MISSING_SECTION,
                        f"{ANALYSIS_2_ANCHOR} does not follow {ANALYSIS_1_ANCHOR}",
                    )
                )
            else:
                judgment = text.find(JUDGMENT_ANCHOR)
                end = (
                    judgment.line
                    if judgment is not None and judgment.line > second.line
                    else None
                )
                analysis_1 = text.block(first, second.line)
                analysis_2 = text.block(second, end)
                for index, analysis in enumerate((analysis_1, analysis_2), start=1):
                    if not analysis:
                        violations.append(
                            FormatViolation(
                                ViolationCode.EMPTY_ANALYSIS,
                                f"analysis of response {index} is empty",
                            )
                        )

        if violations:
            return MalformedTurn(raw=raw, violations=tuple(violations))
        return BranchTrace(
            selected=selected, analysis_1=analysis_1, analysis_2=analysis_2, raw=raw
        )


class RethinkParser(TurnParser):
    """Parses the verdict turn: a judgment block ending in one boxed verdict."""

    def __init__(self, *, require_judgment: bool = True, scaled: bool = False) -> None:
        """
        Instantiate a `RethinkParser`.

        Args:
          require_judgment: Require a `JUDGMENT:` anchor. Without it the whole
            text is the answer region (used when the verdict closes the
            branching turn).
          scaled: Read the boxed value as a -3..3 score of response 1 instead
            of a 1/2 verdict.
        """
        self.require_judgment = require_judgment
        self.scaled = scaled

    def _read_verdict(
        self, content: str, violations: list[FormatViolation]
    ) -> tuple[int | None, int | None]:
        value = content.strip()
        if not self.scaled:
            if value in {"1", "2"}:
                return int(value), None
            violations.append(
                FormatViolation(
                    ViolationCode.INVALID_VERDICT_VALUE,
                    f"boxed value {value!r} is not 1 or 2",
                )
            )
            return None, None

        try:
            score = int(value)
        except ValueError:
            score = 0
        if score == 0 or not SCALED_MIN <= score <= SCALED_MAX:
            violations.append(
                FormatViolation(
                    ViolationCode.INVALID_VERDICT_VALUE,
                    f"boxed value {value!r} is not a non-zero integer "
                    f"in {SCALED_MIN}..{SCALED_MAX}",
                )
            )
            return None, None
        return (1 if score > 0 else 2), score

    def parse(self, raw: str) -> RethinkTrace | MalformedTurn:
        """
        Parse a verdict turn.

        Args:
          raw: The complete turn text.

        Returns:
          A `RethinkTrace` on success, else a `MalformedTurn`.
        """
        text = _AnchoredText(raw)
        violations: list[FormatViolation] = []

        anchor = text.find(JUDGMENT_ANCHOR)
        if anchor is None and self.require_judgment:
            violations.append(
                FormatViolation(
                    ViolationCode.MISSING_SECTION, f"no {JUDGMENT_ANCHOR} block"
                )
            )
            return MalformedTurn(raw=raw, violations=tuple(violations))

        if anchor is None:
            region = text.unfenced_text(-1, "")
            judgment = ""
        else:
            region = text.unfenced_text(anchor.line, anchor.inline)
            judgment = text.block(anchor, None)

        markers, unclosed = scan_boxed(region)
        count = len(markers) + len(unclosed)
        verdict = score = None
        if not markers:
            detail = "no boxed verdict in the answer"
            if unclosed:
                detail += f" ({len(unclosed)} unclosed)"
            violations.append(FormatViolation(ViolationCode.MISSING_VERDICT, detail))
        elif count > 1:
            detail = f"{count} boxed verdicts in the answer"
            if unclosed:
                detail += f", {len(unclosed)} unclosed"
            violations.append(
                FormatViolation(ViolationCode.MULTIPLE_VERDICTS, detail)
            )
        else:
            verdict, score = self._read_verdict(markers[-1][2], violations)

        for _, _, content in find_boxed(judgment):
            judgment = judgment.replace(BOXED_PREFIX + content + "}", "")
        judgment = judgment.strip()
        if anchor is not None and not judgment:
            violations.append(
                FormatViolation(ViolationCode.EMPTY_ANALYSIS, "judgment is empty")
            )

        if violations or verdict is None:
            return MalformedTurn(raw=raw, violations=tuple(violations))
        return RethinkTrace(judgment=judgment, verdict=verdict, raw=raw, score=score)


def parse_branch(raw: str, criteria: CriteriaSet) -> BranchTrace | MalformedTurn:
    """Parse a first turn against `criteria`."""
    return BranchParser(criteria).parse(raw)


def parse_rethink(
    raw: str, *, require_judgment: bool = True, scaled: bool = False
) -> RethinkTrace | MalformedTurn:
    """Parse a verdict turn; see `RethinkParser` for the options."""
    return RethinkParser(require_judgment=require_judgment, scaled=scaled).parse(raw)


def split_single_turn(raw: str) -> tuple[str, str]:
    """
    Split a merged single-turn generation at its `JUDGMENT:` anchor.

    Returns:
        `(branch_part, rethink_part)`, which concatenate back to `raw`. Without
        an anchor the whole text is the branch part.
    """
    offset = 0
    text = _AnchoredText(raw)
    anchor = text.find(JUDGMENT_ANCHOR)
    if anchor is None:
        return raw, ""
    for line in raw.splitlines(keepends=True)[: anchor.line]:
        offset += len(line)
    return raw[:offset], raw[offset:]


def assemble_trace(
    branch_result: BranchTrace | MalformedTurn,
    rethink_result: RethinkTrace | MalformedTurn,
    *,
    rethink_raw: str | None = None,
) -> DeliberationTrace:
    """
    Combine two parsed turns into a `DeliberationTrace`.

    Args:
        branch_result: The parsed (or malformed) first turn.
        rethink_result: The parsed (or malformed) second turn.
        rethink_raw: Overrides the second-turn text, for pipelines where the
          verdict was read from the first turn and no second turn exists.

    Returns:
        The assembled trace; its violations are those of both turns.
    """
    branch = branch_result if isinstance(branch_result, BranchTrace) else None
    rethink = rethink_result if isinstance(rethink_result, RethinkTrace) else None
    branch_violations = (
        branch_result.violations if isinstance(branch_result, MalformedTurn) else ()
    )
    rethink_violations = (
        rethink_result.violations if isinstance(rethink_result, MalformedTurn) else ()
    )
    return DeliberationTrace(
        branch=branch,
        rethink=rethink,
        branch_raw=branch_result.raw,
        rethink_raw=rethink_result.raw if rethink_raw is None else rethink_raw,
        branch_violations=branch_violations,
        rethink_violations=rethink_violations,
    )


def parse_trace(
    branch_raw: str, rethink_raw: str, criteria: CriteriaSet, *, scaled: bool = False
) -> DeliberationTrace:
    """
    Parse a stored two-turn trace.

    An empty second turn is read as a merged generation: the verdict is taken
    from the first turn, as `branching_only` pipelines write it.
    """
    if not rethink_raw:
        return assemble_trace(
            parse_branch(branch_raw, criteria),
            parse_rethink(branch_raw, require_judgment=False, scaled=scaled),
            rethink_raw="",
        )
    return assemble_trace(
        parse_branch(branch_raw, criteria), parse_rethink(rethink_raw, scaled=scaled)
    )


def format_branch_turn(names: list[str], analysis_1: str, analysis_2: str) -> str:
    """Write a first turn in the trace format."""
    return (
        f"{SELECTED_ANCHOR} {', '.join(names)}\n"
        f"{ANALYSIS_1_ANCHOR}\n{analysis_1}\n"
        f"{ANALYSIS_2_ANCHOR}\n{analysis_2}\n"
    )


def format_rethink_turn(judgment: str, verdict: int | str) -> str:
    """Write a verdict turn in the trace format."""
    return f"{JUDGMENT_ANCHOR}\n{judgment}\n{BOXED_PREFIX}{verdict}}}\n"
