"""LLM gateway: one interface over chat-completion, Ollama, scripted and oracle backends."""

import json
import os
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Deque, Dict, List, Optional, Tuple

import requests
from langchain_ollama import ChatOllama
from pydantic import BaseModel, Field, field_validator
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from app.models import BackendConfig, RoleTag
from app.utils.exceptions import BackendUnavailable, ConfigError, ScriptExhausted
from app.utils.logging_config import log_backend_call, logger, redact


ORACLE_WRONG_LINE = "pass"


class GenRequest(BaseModel):
    """One generation call."""

    role_tag: RoleTag
    prompt: str
    max_new_tokens: int = 128
    temperature: float = Field(default=0.0, ge=0.0)
    stop_sequences: List[str] = Field(default_factory=list)
    task_id: Optional[str] = None

    @field_validator("prompt")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        if not value:
            raise ValueError("prompt must not be empty")
        return value


class GenResponse(BaseModel):
    """Backend output; text may be empty."""

    text: str = ""
    backend_id: str
    latency_ms: float = Field(ge=0.0)
    token_usage: Optional[Dict[str, int]] = None


class ScriptedResponse(BaseModel):
    """A canned reply; `match` is a substring the prompt must contain (None matches anything)."""

    role_tag: RoleTag
    text: str
    match: Optional[str] = None


def _int_usage(usage) -> Optional[Dict[str, int]]:
    if not usage:
        return None
    counts = {k: v for k, v in dict(usage).items() if isinstance(v, int)}
    return counts or None


class _TransientError(Exception):
    """Failure worth retrying (network error, timeout, 429, 5xx)."""


class ScriptedBackend:
    """
    Plays back canned responses per role.

    A request consumes the first queued response of its role whose match
    rule accepts the prompt. Single consumer by contract.
    """

    backend_id = "scripted"

    def __init__(self, responses: Optional[List[ScriptedResponse]] = None):
        self._queues: Dict[str, Deque[ScriptedResponse]] = {"actor": deque(), "reflector": deque()}
        self._lock = threading.Lock()
        for r in responses or []:
            self._queues[r.role_tag].append(r)

    @classmethod
    def from_file(cls, path: str) -> "ScriptedBackend":
        """Load a JSONL script: one {role_tag, text, match?} object per line."""
        responses = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    responses.append(ScriptedResponse(**json.loads(line)))
        return cls(responses)

    def remaining(self, role_tag: str) -> int:
        return len(self._queues[role_tag])

    def complete(self, req: GenRequest) -> Tuple[str, Optional[Dict[str, int]]]:
        with self._lock:
            queue = self._queues[req.role_tag]
            for i, response in enumerate(queue):
                if response.match is None or response.match in req.prompt:
                    del queue[i]
                    return response.text, None
        raise ScriptExhausted(
            f"No scripted {req.role_tag} response left for task {req.task_id} "
            f"({len(queue)} queued, none matching)"
        )


class OracleBackend:
    """
    Returns a task's ground-truth line iff the prompt contains the sentinel.

    Otherwise a fixed wrong line. Reflector requests get an empty reply.
    """

    backend_id = "oracle"

    def __init__(self, answers: Optional[Dict[str, str]] = None, sentinel: str = "__ORACLE_SENTINEL__",
                 wrong_line: str = ORACLE_WRONG_LINE):
        self.answers = dict(answers or {})
        self.sentinel = sentinel
        self.wrong_line = wrong_line

    def complete(self, req: GenRequest) -> Tuple[str, Optional[Dict[str, int]]]:
        if req.role_tag == "reflector":
            return "", None
        if req.task_id in self.answers and self.sentinel in req.prompt:
            return self.answers[req.task_id], None
        return self.wrong_line, None


class _RetryingBackend:
    """Shared retry discipline: max_retries extra attempts with exponential backoff."""

    def __init__(self, config: BackendConfig):
        self.config = config

    def _retry(self, fn, req: GenRequest):
        retryer = Retrying(
            stop=stop_after_attempt(self.config.max_retries + 1),
            wait=wait_exponential(multiplier=self.config.retry_backoff, min=0, max=60),
            retry=retry_if_exception_type(_TransientError),
            before_sleep=lambda state: logger.warning(
                f"{self.backend_id} attempt {state.attempt_number} failed: {state.outcome.exception()}",
                extra={"task_id": req.task_id, "attempt": state.attempt_number, "backend_id": self.backend_id},
            ),
            reraise=False,
        )
        try:
            return retryer(fn, req)
        except RetryError as e:
            attempts = e.last_attempt.attempt_number
            raise BackendUnavailable(
                f"{self.backend_id} unavailable after {attempts} attempts: {e.last_attempt.exception()}",
                task_id=req.task_id,
                attempts=attempts,
            ) from e

    def _messages(self, req: GenRequest) -> List[Dict[str, str]]:
        messages = []
        if self.config.system_prompt:
            messages.append({"role": "system", "content": self.config.system_prompt})
        messages.append({"role": "user", "content": req.prompt})
        return messages


class HttpChatBackend(_RetryingBackend):
    """OpenAI-compatible chat-completions endpoint over HTTP."""

    def __init__(self, config: BackendConfig, session: Optional[requests.Session] = None):
        super().__init__(config)
        self.api_key = os.getenv(config.api_key_env, "").strip()
        if not self.api_key:
            raise ConfigError(f"Missing API key: environment variable {config.api_key_env} is not set")
        self.url = self._chat_url(config.endpoint_url)
        self._session = session
        self._local = threading.local()
        self.backend_id = f"http_chat:{config.model_name}"

    @staticmethod
    def _chat_url(endpoint_url: str) -> str:
        url = endpoint_url.rstrip("/")
        if not url.endswith("/chat/completions"):
            url += "/chat/completions"
        return url

    @property
    def session(self) -> requests.Session:
        """Injected session, else one per worker thread."""
        if self._session is not None:
            return self._session
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def _post(self, req: GenRequest) -> Tuple[str, Optional[Dict[str, int]]]:
        payload = {
            "model": self.config.model_name,
            "messages": self._messages(req),
            "temperature": req.temperature,
            "max_tokens": req.max_new_tokens,
        }
        if req.stop_sequences:
            payload["stop"] = req.stop_sequences
        logger.debug(f"POST {self.url} {json.dumps(payload)[:2000]}", extra={"task_id": req.task_id})

        try:
            response = self.session.post(
                self.url,
                json=payload,
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.config.timeout,
            )
        except (requests.ConnectionError, requests.Timeout) as e:
            raise _TransientError(str(e)) from e

        body = redact(response.text, self.api_key)
        logger.debug(f"Response {response.status_code}: {body[:2000]}", extra={"task_id": req.task_id})
        if response.status_code == 429 or response.status_code >= 500:
            raise _TransientError(f"HTTP {response.status_code}")
        if response.status_code >= 400:
            raise BackendUnavailable(f"HTTP {response.status_code}: {body[:200]}", task_id=req.task_id, attempts=1)

        try:
            data = response.json()
            text = data["choices"][0]["message"].get("content") or ""
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise BackendUnavailable(f"Malformed chat-completions response: {e}", task_id=req.task_id, attempts=1)
        return text, _int_usage(data.get("usage"))

    def complete(self, req: GenRequest) -> Tuple[str, Optional[Dict[str, int]]]:
        return self._retry(self._post, req)


class OllamaBackend(_RetryingBackend):
    """Ollama daemon reached through LangChain's ChatOllama."""

    def __init__(self, config: BackendConfig):
        super().__init__(config)
        self.backend_id = f"ollama:{config.model_name}"
        self._llm = None

    def get_llm(self, req: GenRequest):
        """
        Get or create a ChatOllama instance.

        Returns:
            ChatOllama: LangChain-compatible Ollama chat model
        """
        if self._llm is None:
            self._llm = ChatOllama(
                model=self.config.model_name,
                base_url=self.config.endpoint_url,
                temperature=req.temperature,
                num_predict=req.max_new_tokens,
                client_kwargs={"timeout": self.config.timeout},
            )
        return self._llm

    def _invoke(self, req: GenRequest) -> Tuple[str, Optional[Dict[str, int]]]:
        llm = self.get_llm(req)
        messages = [(m["role"] if m["role"] == "system" else "human", m["content"]) for m in self._messages(req)]
        try:
            response = llm.invoke(messages, stop=req.stop_sequences or None)
        except Exception as e:
            raise _TransientError(str(e)) from e
        text = response.content if hasattr(response, "content") else str(response)
        usage = getattr(response, "usage_metadata", None)
        return text or "", _int_usage(usage)

    def complete(self, req: GenRequest) -> Tuple[str, Optional[Dict[str, int]]]:
        return self._retry(self._invoke, req)


def create_backend(config: BackendConfig, answers: Optional[Dict[str, str]] = None):
    """
    Factory for the backend named by config.kind.

    Args:
        config: Backend configuration
        answers: task_id -> ground truth, used by the oracle backend

    Returns:
        Backend instance exposing complete(req)
    """
    if config.kind == "http_chat":
        return HttpChatBackend(config)
    if config.kind == "ollama":
        return OllamaBackend(config)
    if config.kind == "oracle":
        return OracleBackend(answers=answers, sentinel=config.sentinel)
    if config.kind == "scripted":
        if config.script_path:
            if not Path(config.script_path).is_file():
                raise ConfigError(f"Script file not found: {config.script_path}")
            return ScriptedBackend.from_file(config.script_path)
        return ScriptedBackend()
    raise ConfigError(f"Unknown backend kind: {config.kind}")


class LLMGateway:
    """Uniform, thread-safe entry point to one backend with a concurrent-request limiter."""

    def __init__(self, config: BackendConfig, backend=None, limiter: Optional[threading.Semaphore] = None,
                 answers: Optional[Dict[str, str]] = None):
        self.config = config
        self.backend = backend if backend is not None else create_backend(config, answers=answers)
        self._limiter = limiter or threading.BoundedSemaphore(config.max_concurrent)

    @property
    def backend_id(self) -> str:
        return self.backend.backend_id

    def generate(self, req: GenRequest) -> GenResponse:
        """
        Send one request to the backend.

        Args:
            req: Generation request

        Returns:
            GenResponse; empty model output yields empty text

        Raises:
            BackendUnavailable: transient failures persisted past max_retries
            ScriptExhausted: scripted backend has no matching response
        """
        with self._limiter:
            start = time.perf_counter()
            text, usage = self.backend.complete(req)
            latency_ms = (time.perf_counter() - start) * 1000.0
        log_backend_call(self.backend_id, req.role_tag, latency_ms, task_id=req.task_id)
        return GenResponse(text=text or "", backend_id=self.backend_id, latency_ms=latency_ms, token_usage=usage)


@dataclass
class Gateways:
    """The actor and reflector gateways of one run."""

    actor: LLMGateway
    reflector: LLMGateway


def build_gateways(actor_config: BackendConfig, reflector_config: BackendConfig,
                   answers: Optional[Dict[str, str]] = None) -> Gateways:
    """Create both gateways sharing one global concurrent-request limiter."""
    limiter = threading.BoundedSemaphore(max(actor_config.max_concurrent, 1))
    return Gateways(
        actor=LLMGateway(actor_config, limiter=limiter, answers=answers),
        reflector=LLMGateway(reflector_config, limiter=limiter, answers=answers),
    )
