"""Generation backends: the toy judge policy and remote chat-completion servers."""

import os
from abc import ABC, abstractmethod
from http import HTTPStatus
from typing import Any

import numpy as np
import requests
from loguru import logger

from rethink_rm.errors import BackendError, TransientBackendError
from rethink_rm.model import (
    Completion,
    EngineConfig,
    GenerationRequest,
    Stage,
    TokenStep,
)
from rethink_rm.parsers import BOXED_PREFIX
from rethink_rm.toy import (
    FILLER,
    VERDICT_1,
    ToyEnvironment,
    ToyPolicy,
    derive_rng,
    render_branch_tokens,
    render_verdict_tokens,
)


class Backend(ABC):
    """Abstract base class defining the functionality supporting generation."""

    max_concurrent: int = 8

    @abstractmethod
    def complete(self, request: GenerationRequest) -> Completion:
        """
        Generate a completion for `request.prompt`.

        Args:
          request: The generation request.

        Returns:
          The raw completion; stop strings are applied by the caller.

        Raises:
          TransientBackendError: On a retryable transport failure.
          BackendError: On a response that cannot be used.
        """
        ...

    def close(self) -> None:  # noqa: B027
        """Release any held resources."""


class ToyBackend(Backend):
    """
    Serves completions sampled from a `ToyPolicy`.

    Requests are routed by their metadata (`item_id`, `stage`, `rollout`,
    `round`, `selected`); every request draws from its own generator derived
    from those keys, so results do not depend on scheduling order.
    """

    def __init__(
        self,
        config: EngineConfig,
        *,
        env: ToyEnvironment | None = None,
        policy: ToyPolicy | None = None,
    ) -> None:
        """
        Instantiate a `ToyBackend`.

        Args:
          config: The engine configuration.
          env: The environment items are judged in; built from config if omitted.
          policy: The policy to sample; a fresh initial policy if omitted.
        """
        self.env = env or ToyEnvironment.from_config(
            config.grpo.environment, config.environment_seed
        )
        self.policy = policy or ToyPolicy.initial(
            self.env.context_dim, config.training_seed, config.grpo.init_scale
        )
        self.criteria = config.trace.criteria_set()
        self.seed = config.seed
        self.max_concurrent = config.backend.max_concurrent

    def _sample(
        self,
        step: int,
        item_id: str,
        criterion: int | None,
        rng: np.random.Generator,
    ) -> TokenStep:
        context = self.env.context(item_id, step, criterion)
        action, logp, logp_ref = self.policy.sample(step, context, rng)
        return TokenStep(
            step=step,
            features=context,
            action=action,
            logp_behavior=logp,
            logp_reference=logp_ref,
        )

    def complete(self, request: GenerationRequest) -> Completion:
        """
        Sample the toy tokens a request's stage calls for and render them as text.

        Args:
          request: The generation request; only its metadata is read.

        Returns:
          The rendered completion with its token records.

        Raises:
          BackendError: If the request has no item id or an unknown stage.
        """
        meta = request.metadata
        item_id = meta.get("item_id")
        if not item_id:
            msg = "Toy requests need an item_id in their metadata."
            raise BackendError(msg)
        try:
            stage = Stage(meta.get("stage", Stage.BRANCH))
        except ValueError as e:
            msg = f"Unknown stage {meta.get('stage')!r}."
            raise BackendError(msg) from e

        rng = derive_rng(
            self.seed,
            "sample",
            meta.get("round", "0"),
            item_id,
            meta.get("rollout", "0"),
            stage.value,
        )

        if stage == Stage.BRANCH:
            token = self._sample(0, item_id, None, rng)
            return Completion(
                text=render_branch_tokens(token.action, self.criteria),
                token_count=1,
                tokens=(token,),
            )

        if stage in (Stage.RETHINK, Stage.UNCONDITIONED):
            selected = [s for s in meta.get("selected", "").split(",") if s]
            criterion = (
                int(selected[0]) - 1
                if selected and stage == Stage.RETHINK
                else None
            )
            token = self._sample(1, item_id, criterion, rng)
            return Completion(
                text=render_verdict_tokens(token.action),
                token_count=1,
                tokens=(token,),
            )

        if stage in (Stage.BRANCH_VERDICT, Stage.SINGLE):
            first = self._sample(0, item_id, None, rng)
            criterion = first.action if first.action != FILLER else None
            second = self._sample(1, item_id, criterion, rng)
            branch = render_branch_tokens(first.action, self.criteria)
            if stage == Stage.SINGLE:
                verdict = render_verdict_tokens(second.action)
            else:
                verdict = (
                    ""
                    if second.action == FILLER
                    else f"{BOXED_PREFIX}{1 if second.action == VERDICT_1 else 2}}}\n"
                )
            return Completion(
                text=branch + verdict, token_count=2, tokens=(first, second)
            )

        msg = f"The toy backend does not serve {stage} requests."
        raise BackendError(msg)


class RemoteBackend(Backend):
    """Posts chat-completion requests to an HTTP inference server."""

    def __init__(self, config: EngineConfig) -> None:
        """
        Instantiate a `RemoteBackend`.

        Args:
          config: The engine configuration; `backend.*` describes the server.
            The credential is read from the environment variable named by
            `backend.api_key_env` and is never logged.
        """
        backend = config.backend
        self.url = backend.endpoint.rstrip("/") + "/" + backend.path.lstrip("/")
        self.model = backend.model
        self.timeout_s = backend.timeout_s
        self.max_concurrent = backend.max_concurrent
        self._session = requests.Session()
        api_key = os.environ.get(backend.api_key_env, "")
        if api_key:
            self._session.headers["Authorization"] = f"Bearer {api_key}"
        logger.info(
            "Remote backend at {url} with model {model}", url=self.url, model=self.model
        )

    def _body(self, request: GenerationRequest) -> dict[str, Any]:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "top_k": request.top_k,
            "stop": list(request.stop_strings),
            "max_tokens": request.max_new_tokens,
        }

    @staticmethod
    def _extract(payload: Any) -> Completion:  # noqa: ANN401
        """Read the generated text and optional usage from a response payload."""
        if not isinstance(payload, dict):
            msg = "Response body is not a JSON object."
            raise BackendError(msg)

        text = None
        choices = payload.get("choices")
        if isinstance(choices, list) and choices and isinstance(choices[0], dict):
            choice = choices[0]
            message = choice.get("message")
            if isinstance(message, dict) and isinstance(message.get("content"), str):
                text = message["content"]
            elif isinstance(choice.get("text"), str):
                text = choice["text"]
        if text is None and isinstance(payload.get("text"), str):
            text = payload["text"]
        if text is None:
            msg = "Response body carries no generated text."
            raise BackendError(msg)

        usage = payload.get("usage")
        tokens = usage.get("completion_tokens") if isinstance(usage, dict) else None
        return Completion(
            text=text, token_count=tokens if isinstance(tokens, int) else None
        )

    def complete(self, request: GenerationRequest) -> Completion:
        """
        POST one request to the server.

        Args:
          request: The generation request.

        Returns:
          The completion text and, when reported, its token usage.

        Raises:
          TransientBackendError: On connection errors, timeouts, 429 or 5xx.
          BackendError: On other error statuses or unusable bodies.
        """
        try:
            response = self._session.post(
                self.url, json=self._body(request), timeout=self.timeout_s
            )
        except (requests.ConnectionError, requests.Timeout) as e:
            msg = f"Transport failure talking to {self.url}: {type(e).__name__}"
            raise TransientBackendError(msg) from e

        status = response.status_code
        logger.debug("POST {url} -> {status}", url=self.url, status=status)
        if (
            status == HTTPStatus.TOO_MANY_REQUESTS
            or status >= HTTPStatus.INTERNAL_SERVER_ERROR
        ):
            msg = f"Server at {self.url} answered {status}."
            raise TransientBackendError(msg)
        if status >= HTTPStatus.BAD_REQUEST:
            msg = f"Server at {self.url} rejected the request with {status}."
            raise BackendError(msg)

        try:
            payload = response.json()
        except ValueError as e:
            msg = f"Server at {self.url} returned invalid JSON."
            raise BackendError(msg) from e
        return self._extract(payload)

    def close(self) -> None:
        """Close the HTTP session."""
        self._session.close()
