"""
Prompt rendering for each judgment turn.

Every item text (prompt, responses, earlier analyses) is quoted in a backtick
fence, and the parsers ignore anchors inside fences, so an item that itself
contains `SELECTED:` or `JUDGMENT:` lines cannot be mistaken for trace sections.
All render functions are pure.
"""

from rethink_rm.criteria import MAX_SELECTED, MIN_SELECTED, CriteriaSet, TaskHierarchy
from rethink_rm.fencing import fence
from rethink_rm.model import BranchTrace, ComparisonItem

SELECTED_ANCHOR = "SELECTED:"
ANALYSIS_1_ANCHOR = "ANALYSIS_1:"
ANALYSIS_2_ANCHOR = "ANALYSIS_2:"
JUDGMENT_ANCHOR = "JUDGMENT:"

_ROLE = (
    "You are a meticulous quality evaluator comparing two responses to the same "
    "user request."
)

_NAME = "<dimension name>"
_BRANCH_FORMAT = f"""{SELECTED_ANCHOR} {_NAME}[, {_NAME}[, {_NAME}]]
{ANALYSIS_1_ANCHOR}
<issues found in response 1, for the selected dimensions only>
{ANALYSIS_2_ANCHOR}
<issues found in response 2, for the selected dimensions only>"""

_BINARY_VERDICT = (
    "\\boxed{1} if response 1 is better, \\boxed{2} if response 2 is better"
)
_SCALED_VERDICT = (
    "\\boxed{s} where s is an integer from -3 to 3 scoring response 1 against "
    "response 2 (positive: response 1 is better, negative: response 2 is better; "
    "0 is not allowed)"
)

_ATTRIBUTION_FORMAT = "DIMENSION: <dimension name or NONE>"


def _verdict_instruction(*, scaled: bool) -> str:
    return _SCALED_VERDICT if scaled else _BINARY_VERDICT


def _render_item(item: ComparisonItem) -> str:
    return (
        "[User Request]\n"
        + fence(item.prompt, "prompt")
        + "\n[Response 1]\n"
        + fence(item.response_1, "response_1")
        + "\n[Response 2]\n"
        + fence(item.response_2, "response_2")
    )


def render_criteria_menu(criteria: CriteriaSet) -> str:
    """Render the numbered criteria menu, one dimension per line."""
    return "\n".join(f"{c.id}. {c.name}: {c.description}" for c in criteria)


def render_branch_prompt(
    item: ComparisonItem, criteria: CriteriaSet, *, require_verdict: bool = False
) -> str:
    """
    Render the adaptive-branching (first turn) prompt.

    Args:
        item: The comparison to judge.
        criteria: The criteria menu to choose from.
        require_verdict: Also demand a boxed verdict at the end of the turn; used
          when the pipeline stops after branching.

    Returns:
        The rendered prompt.
    """
    parts = [
        _ROLE,
        "",
        _render_item(item),
        "[Quality Assessment Focus]",
        f"Select {MIN_SELECTED} to {MAX_SELECTED} dimensions from the list below that "
        "are most critical for judging these two responses. Use the names exactly "
        "as written.",
        render_criteria_menu(criteria),
        "",
        "[Issue Analysis]",
        "For each response, analyze only the selected dimensions and list the "
        "concrete issues you find. Do not comment on other dimensions.",
        "",
        "[Output Format]",
        "Write the anchors at the start of a line, exactly as shown:",
        fence(_BRANCH_FORMAT, "format"),
    ]
    if require_verdict:
        parts += [
            "Finish with a single verdict on its own line: "
            + _verdict_instruction(scaled=False)
            + ".",
        ]
    return "\n".join(parts) + "\n"


def render_rethink_prompt(
    item: ComparisonItem,
    branch: BranchTrace,
    hierarchy: TaskHierarchy,
    criteria: CriteriaSet,
    *,
    scaled: bool = False,
) -> str:
    """
    Render the branch-conditioned rethinking (second turn) prompt.

    Args:
        item: The comparison being judged.
        branch: The parsed first turn the judgment is conditioned on.
        hierarchy: The importance ordering for the item's task family.
        criteria: The criteria set the branch ids refer to.
        scaled: Ask for a -3..3 score instead of a binary verdict.

    Returns:
        The rendered prompt.

    Raises:
        ValueError: If `branch` is not a parsed `BranchTrace`.
    """
    if not isinstance(branch, BranchTrace):
        msg = "Rethinking must be conditioned on a well-formed first turn."
        raise ValueError(msg)  # noqa: TRY004

    focus = "\n".join(f"- {criteria.by_id(cid).name}" for cid in branch.selected)
    parts = [
        _ROLE,
        "",
        _render_item(item),
        "[Selected Focus]",
        focus,
        "",
        "[Earlier Issue Analysis]",
        "Response 1:",
        fence(branch.analysis_1, "analysis_1"),
        "Response 2:",
        fence(branch.analysis_2, "analysis_2"),
        "[Rethink]",
        "Re-examine both responses through the selected dimensions above. Verify "
        "each issue from the earlier analysis, look for anything it missed, and "
        "weigh the issues using this hierarchy of importance:",
        hierarchy.render(),
        "",
        "[Output Format]",
        f"Start a line with {JUDGMENT_ANCHOR} followed by your comparative "
        "judgment, then end with exactly one "
        + _verdict_instruction(scaled=scaled)
        + ".",
    ]
    return "\n".join(parts) + "\n"


def render_raw_rethink_prompt(
    item: ComparisonItem,
    branch_raw: str,
    hierarchy: TaskHierarchy,
    *,
    scaled: bool = False,
) -> str:
    """
    Render the second-turn prompt after a first turn that failed to parse.

    The raw first turn is quoted as-is so the model can still recover the format.
    """
    parts = [
        _ROLE,
        "",
        _render_item(item),
        "[Earlier Analysis]",
        fence(branch_raw, "first_turn"),
        "[Rethink]",
        "Re-examine both responses, focusing on the dimensions your earlier "
        "analysis identified, and weigh the issues using this hierarchy of "
        "importance:",
        hierarchy.render(),
        "",
        "[Output Format]",
        f"Start a line with {JUDGMENT_ANCHOR} followed by your comparative "
        "judgment, then end with exactly one "
        + _verdict_instruction(scaled=scaled)
        + ".",
    ]
    return "\n".join(parts) + "\n"


def render_unconditioned_rethink_prompt(
    item: ComparisonItem, criteria: CriteriaSet, *, scaled: bool = False
) -> str:
    """Render a generic re-evaluation prompt that ignores the first turn."""
    parts = [
        _ROLE,
        "",
        _render_item(item),
        "[Rethink]",
        "Re-evaluate the responses carefully, considering all of these "
        "dimensions:",
        render_criteria_menu(criteria),
        "",
        "[Output Format]",
        f"Start a line with {JUDGMENT_ANCHOR} followed by your comparative "
        "judgment, then end with exactly one "
        + _verdict_instruction(scaled=scaled)
        + ".",
    ]
    return "\n".join(parts) + "\n"


def render_single_turn_prompt(
    item: ComparisonItem,
    criteria: CriteriaSet,
    hierarchy: TaskHierarchy,
    *,
    scaled: bool = False,
) -> str:
    """
    Render the merged prompt that asks for both turns in one generation.

    Args:
        item: The comparison to judge.
        criteria: The criteria menu to choose from.
        hierarchy: The importance ordering for the item's task family.
        scaled: Ask for a -3..3 score instead of a binary verdict.

    Returns:
        The rendered prompt.
    """
    parts = [
        _ROLE,
        "",
        _render_item(item),
        "[Quality Assessment Focus]",
        f"Select {MIN_SELECTED} to {MAX_SELECTED} dimensions from the list below that "
        "are most critical for judging these two responses. Use the names exactly "
        "as written.",
        render_criteria_menu(criteria),
        "",
        "[Issue Analysis]",
        "For each response, analyze only the selected dimensions and list the "
        "concrete issues you find.",
        "",
        "[Rethink]",
        "Then re-examine both responses through the selected dimensions, verify "
        "each issue, and weigh them using this hierarchy of importance:",
        hierarchy.render(),
        "",
        "[Output Format]",
        "Write the anchors at the start of a line, exactly as shown:",
        fence(f"{_BRANCH_FORMAT}\n{JUDGMENT_ANCHOR}\n<comparative judgment>", "format"),
        "End with exactly one " + _verdict_instruction(scaled=scaled) + ".",
    ]
    return "\n".join(parts) + "\n"


def render_attribution_prompt(sentence: str, criteria: CriteriaSet) -> str:
    """Render the prompt asking an external judge which dimension a sentence serves."""
    parts = [
        "Which one of these evaluation dimensions does the sentence below mainly "
        "address?",
        render_criteria_menu(criteria),
        "",
        "[Sentence]",
        fence(sentence, "sentence"),
        "Answer with a single line, using the dimension name exactly as written:",
        _ATTRIBUTION_FORMAT,
    ]
    return "\n".join(parts) + "\n"
