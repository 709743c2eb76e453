"""Scripted generation backends for tests."""

import threading
import time
from collections.abc import Callable, Iterable

from rethink_rm.backends import Backend
from rethink_rm.errors import BackendError, TransientBackendError
from rethink_rm.fencing import fenced_blocks
from rethink_rm.model import Completion, EngineConfig, GenerationRequest, Stage
from rethink_rm.parsers import format_branch_turn, format_rethink_turn

GOLD_MARKER = "<gold>"

BRANCH_TEXT = format_branch_turn(
    ["Logical Reasoning"],
    "The proof in response 1 skips a step.",
    "The proof in response 2 is complete.",
)


def boxed(verdict: int | str) -> str:
    return f"\\boxed{{{verdict}}}\n"


class ScriptedBackend(Backend):
    """
    Answers each stage with a fixed first turn and a verdict picked by `choose`.

    `choose` receives the fenced blocks of the prompt (`response_1`,
    `response_2`, ...), so it sees exactly what a judge would see.
    """

    def __init__(
        self,
        choose: Callable[[dict[str, str]], int | str],
        *,
        branch_text: str = BRANCH_TEXT,
        attribution: str = "DIMENSION: NONE",
    ) -> None:
        self.choose = choose
        self.branch_text = branch_text
        self.attribution = attribution
        self.requests: list[GenerationRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: GenerationRequest) -> Completion:
        with self._lock:
            self.requests.append(request)
        stage = Stage(request.metadata.get("stage", Stage.BRANCH))
        blocks = fenced_blocks(request.prompt)
        if stage == Stage.ATTRIBUTION:
            return Completion(self.attribution)
        if stage == Stage.BRANCH:
            return Completion(self.branch_text)
        verdict = self.choose(blocks)
        if stage == Stage.BRANCH_VERDICT:
            return Completion(self.branch_text + boxed(verdict))
        rethink = format_rethink_turn("Response quality decides it.", verdict)
        if stage == Stage.SINGLE:
            return Completion(self.branch_text + rethink)
        return Completion(rethink)

    def stages(self) -> list[str]:
        return [r.metadata["stage"] for r in self.requests]


def oracle_choice(blocks: dict[str, str]) -> int:
    return 1 if GOLD_MARKER in blocks.get("response_1", "") else 2


class OracleBackend(ScriptedBackend):
    """Always picks the response carrying the gold marker."""

    def __init__(self, config: EngineConfig | None = None, **kwargs: str) -> None:  # noqa: ARG002
        super().__init__(oracle_choice, **kwargs)


class FlipBackend(ScriptedBackend):
    """Always picks the response without the gold marker."""

    def __init__(self, config: EngineConfig | None = None) -> None:  # noqa: ARG002
        super().__init__(lambda blocks: 3 - oracle_choice(blocks))


class PositionBiasBackend(ScriptedBackend):
    """Always picks the response presented first."""

    def __init__(self, config: EngineConfig | None = None) -> None:  # noqa: ARG002
        super().__init__(lambda _: 1)


class LaterCandidateBackend(ScriptedBackend):
    """Always picks the response presented second."""

    def __init__(self, config: EngineConfig | None = None) -> None:  # noqa: ARG002
        super().__init__(lambda _: 2)


class CannedBackend(Backend):
    """Returns the same text for every request."""

    def __init__(self, text: str, token_count: int | None = None) -> None:
        self.text = text
        self.token_count = token_count
        self.requests: list[GenerationRequest] = []

    def complete(self, request: GenerationRequest) -> Completion:
        self.requests.append(request)
        return Completion(self.text, token_count=self.token_count)


class FlakyBackend(Backend):
    """Fails transiently `failures` times, then delegates."""

    def __init__(self, inner: Backend, failures: int) -> None:
        self.inner = inner
        self.failures = failures
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, request: GenerationRequest) -> Completion:
        with self._lock:
            self.calls += 1
            failing = self.calls <= self.failures
        if failing:
            msg = "connection reset"
            raise TransientBackendError(msg)
        return self.inner.complete(request)


class BrokenForItems(Backend):
    """Raises a permanent backend error for the listed item ids."""

    def __init__(self, inner: Backend, item_ids: Iterable[str]) -> None:
        self.inner = inner
        self.item_ids = set(item_ids)

    def complete(self, request: GenerationRequest) -> Completion:
        if request.metadata.get("item_id", "").split("#")[0] in self.item_ids:
            msg = "HTTP 400: bad request"
            raise BackendError(msg)
        return self.inner.complete(request)


class CountingBackend(Backend):
    """Records the largest number of requests in flight at once."""

    def __init__(self, inner: Backend, delay_s: float = 0.01) -> None:
        self.inner = inner
        self.delay_s = delay_s
        self.in_flight = 0
        self.peak = 0
        self._lock = threading.Lock()

    def complete(self, request: GenerationRequest) -> Completion:
        with self._lock:
            self.in_flight += 1
            self.peak = max(self.peak, self.in_flight)
        try:
            time.sleep(self.delay_s)
            return self.inner.complete(request)
        finally:
            with self._lock:
                self.in_flight -= 1
