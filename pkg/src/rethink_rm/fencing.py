"""Backtick fences that keep quoted text from being read as trace sections."""

import re

_BACKTICK_RUN = re.compile(r"`+")
_FENCE_LINE = re.compile(r"^(`{3,})(.*)$")
MIN_FENCE = 3


def fence(body: str, label: str = "") -> str:
    """
    Wrap `body` in a backtick fence longer than any backtick run inside it.

    Args:
        body: The text to quote.
        label: Info string written after the opening fence.

    Returns:
        The fenced block, ending with a newline.
    """
    longest = max((len(run) for run in _BACKTICK_RUN.findall(body)), default=0)
    marker = "`" * max(MIN_FENCE, longest + 1)
    return f"{marker}{label}\n{body}\n{marker}\n"


def fenced_line_mask(lines: list[str]) -> list[bool]:
    """
    Mark which lines sit inside (or delimit) a backtick fence.

    An unclosed fence runs to the end of the text.
    """
    mask = []
    open_len = 0
    for line in lines:
        match = _FENCE_LINE.match(line)
        if open_len == 0:
            if match:
                open_len = len(match.group(1))
            mask.append(open_len > 0)
            continue
        mask.append(True)
        if match and len(match.group(1)) >= open_len and not match.group(2).strip():
            open_len = 0
    return mask


def fenced_blocks(text: str) -> dict[str, str]:
    """Return the body of every labelled fence in `text`, keyed by label."""
    blocks: dict[str, str] = {}
    label: str | None = None
    open_len = 0
    body: list[str] = []
    for line in text.split("\n"):
        match = _FENCE_LINE.match(line)
        if open_len == 0:
            if match:
                open_len = len(match.group(1))
                label = match.group(2).strip()
                body = []
            continue
        if match and len(match.group(1)) >= open_len and not match.group(2).strip():
            if label:
                blocks[label] = "\n".join(body)
            open_len = 0
            continue
        body.append(line)
    return blocks
