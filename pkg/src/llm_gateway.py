"""Chat-completion gateway over a live HTTP backend or a scripted stub."""
from __future__ import annotations

from typing import Any, Dict, Iterable, List, Literal, Optional, Protocol

import json
import logging
import random
import threading
import time
from pathlib import Path

import requests
from pydantic import BaseModel, Field, model_validator
from requests.exceptions import HTTPError, RequestException

from config import settings

from .domain_env import ToolCall, ToolSpec

logger = logging.getLogger(__name__)


class GatewayError(RuntimeError):
    """Transport failure after retries, or an unusable backend reply."""


class UnknownToolError(GatewayError):
    """The backend called a tool that was not offered."""


class ChatMessage(BaseModel):
    role: Literal["system", "user", "assistant", "tool"]
    content: Optional[str] = None
    tool_calls: Optional[List[ToolCall]] = None
    tool_call_id: Optional[str] = None

    @model_validator(mode="after")
    def _shape(self) -> "ChatMessage":
        if self.role == "assistant" and self.content is None and not self.tool_calls:
            raise ValueError("assistant messages need content or tool_calls")
        if self.role == "tool" and (self.tool_call_id is None or self.content is None):
            raise ValueError("tool messages need tool_call_id and content")
        if self.role != "assistant" and self.tool_calls:
            raise ValueError("only assistant messages carry tool_calls")
        return self

    def to_wire(self) -> Dict[str, Any]:
        body: Dict[str, Any] = {"role": self.role, "content": self.content}
        if self.tool_calls:
            body["tool_calls"] = [
                {
                    "id": call.call_id,
                    "type": "function",
                    "function": {"name": call.name, "arguments": json.dumps(call.arguments, sort_keys=True)},
                }
                for call in self.tool_calls
            ]
        if self.tool_call_id is not None:
            body["tool_call_id"] = self.tool_call_id
        return body


class ModelConfig(BaseModel):
    endpoint: str = Field(default_factory=lambda: settings.AGENTFORGE_ENDPOINT)
    model: str = Field(default_factory=lambda: settings.AGENTFORGE_MODEL)
    temperature: float = Field(default=1.0, ge=0.0)
    max_tokens: int = Field(default=1024, gt=0)
    timeout: float = Field(default=60.0, gt=0)
    retries: int = Field(default=3, ge=0)
    backoff: float = Field(default=1.0, ge=0.0)


class CallReport(BaseModel):
    attempts: int
    retries: int
    status: Literal["ok", "failed"]


class Backend(Protocol):
    def chat(
        self,
        messages: List[ChatMessage],
        tools: Optional[List[ToolSpec]],
        sampling: Dict[str, Any],
        conversation: str,
    ) -> ChatMessage: ...


class RateLimiter:
    """Simple token bucket style rate limiter.

    Ensures no more than ``requests_per_minute`` calls are made in any 60
    second window by sleeping as needed before allowing each request to
    proceed. Thread-safe so multiple threads can share the limiter.
    """

    def __init__(self, requests_per_minute: int) -> None:
        self.interval = 60.0 / max(1, requests_per_minute)
        self.lock = threading.Lock()
        self.last_time = 0.0

    def acquire(self) -> None:
        with self.lock:
            now = time.time()
            wait = self.last_time + self.interval - now
            if wait > 0:
                time.sleep(wait)
            self.last_time = time.time()


rate_limiter = RateLimiter(settings.AGENTFORGE_REQUESTS_PER_MINUTE)


def parse_assistant(data: Dict[str, Any]) -> ChatMessage:
    """Turn a chat-completions response body into an assistant message."""
    try:
        message = data["choices"][0]["message"]
        calls = [
            ToolCall(
                name=raw["function"]["name"],
                arguments=json.loads(raw["function"].get("arguments") or "{}"),
                call_id=raw.get("id"),
            )
            for raw in message.get("tool_calls") or []
        ]
        return ChatMessage(role="assistant", content=message.get("content"), tool_calls=calls or None)
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise GatewayError(f"malformed backend payload: {exc}") from exc


class HttpBackend:
    """Backend speaking the chat-completions JSON protocol over ``requests``."""

    def __init__(self, config: ModelConfig, api_key: Optional[str] = None) -> None:
        self.config = config
        self.api_key = api_key if api_key is not None else settings.AGENTFORGE_API_KEY
        self.reports: List[CallReport] = []
        self._lock = threading.Lock()

    def _record(self, report: CallReport) -> None:
        with self._lock:
            self.reports.append(report)

    def chat(
        self,
        messages: List[ChatMessage],
        tools: Optional[List[ToolSpec]] = None,
        sampling: Optional[Dict[str, Any]] = None,
        conversation: str = "default",
    ) -> ChatMessage:
        cfg = self.config
        headers = {
            "Authorization": f"Bearer {self.api_key}",
            "Content-Type": "application/json",
        }
        payload: Dict[str, Any] = {
            "model": cfg.model,
            "messages": [m.to_wire() for m in messages],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
        }
        if tools:
            payload["tools"] = [spec.to_openai() for spec in tools]
        payload.update(sampling or {})

        attempts = cfg.retries + 1
        _backoff = cfg.backoff
        for attempt in range(1, attempts + 1):
            try:
                rate_limiter.acquire()
                resp = requests.post(cfg.endpoint, json=payload, headers=headers, timeout=cfg.timeout)
                if resp.status_code >= 400:
                    resp.raise_for_status()
                message = parse_assistant(resp.json())
                self._record(CallReport(attempts=attempt, retries=attempt - 1, status="ok"))
                return message

            except GatewayError:
                self._record(CallReport(attempts=attempt, retries=attempt - 1, status="failed"))
                raise

            except requests.exceptions.JSONDecodeError as exc:
                self._record(CallReport(attempts=attempt, retries=attempt - 1, status="failed"))
                raise GatewayError(f"malformed backend payload: {exc}") from exc

            except HTTPError as exc:
                status = exc.response.status_code if exc.response is not None else None
                if status == 429 and attempt < attempts:
                    retry_after = exc.response.headers.get("Retry-After")
                    try:
                        wait = float(retry_after)
                    except (TypeError, ValueError):
                        wait = _backoff
                    jitter = random.uniform(0, wait / 2)
                    logger.warning(
                        "Backend rate limited (429). Retrying in %.2f seconds (attempt %s/%s)",
                        wait + jitter,
                        attempt,
                        attempts,
                    )
                    time.sleep(wait + jitter)
                    _backoff *= 2
                elif status and 500 <= status < 600 and attempt < attempts:
                    jitter = random.uniform(0, _backoff / 2)
                    logger.warning(
                        "Backend HTTP %s. Retrying in %.2f seconds (attempt %s/%s)",
                        status,
                        _backoff + jitter,
                        attempt,
                        attempts,
                    )
                    time.sleep(_backoff + jitter)
                    _backoff *= 2
                else:
                    self._record(CallReport(attempts=attempt, retries=attempt - 1, status="failed"))
                    raise GatewayError(f"backend HTTP {status}") from exc

            except RequestException as exc:
                if attempt < attempts:
                    jitter = random.uniform(0, _backoff / 2)
                    logger.warning(
                        "Request error %s. Retrying in %.2f seconds (attempt %s/%s)",
                        exc,
                        _backoff + jitter,
                        attempt,
                        attempts,
                    )
                    time.sleep(_backoff + jitter)
                    _backoff *= 2
                else:
                    self._record(CallReport(attempts=attempt, retries=attempt - 1, status="failed"))
                    raise GatewayError(f"transport failure after {attempt} attempts: {exc}") from exc

            except ValueError as exc:
                self._record(CallReport(attempts=attempt, retries=attempt - 1, status="failed"))
                raise GatewayError(f"malformed backend payload: {exc}") from exc
        raise GatewayError("retry budget exhausted")  # pragma: no cover


class StubEntry(BaseModel):
    match: str = ""
    conversation: str = ""
    replies: List[ChatMessage]


class ScriptedStub:
    """Deterministic backend replaying canned assistant messages.

    The first entry whose ``match`` is a substring of the last non-assistant
    message (and whose ``conversation`` is a substring of the conversation
    key) answers. Each (conversation, entry) pair keeps its own cursor and
    cycles through the entry's replies.
    """

    def __init__(self, entries: Iterable[StubEntry]) -> None:
        self.entries = list(entries)
        self._cursors: Dict[tuple[str, int], int] = {}
        self._call_ids: Dict[str, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedStub":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        entries = data["entries"] if isinstance(data, dict) else data
        return cls(StubEntry.model_validate(e) for e in entries)

    def chat(
        self,
        messages: List[ChatMessage],
        tools: Optional[List[ToolSpec]] = None,
        sampling: Optional[Dict[str, Any]] = None,
        conversation: str = "default",
    ) -> ChatMessage:
        last = next((m.content or "" for m in reversed(messages) if m.role != "assistant"), "")
        for index, entry in enumerate(self.entries):
            if entry.match in last and entry.conversation in conversation:
                break
        else:
            raise GatewayError(f"stub has no scripted reply for: {last[:80]!r}")
        with self._lock:
            cursor = self._cursors.get((conversation, index), 0)
            self._cursors[(conversation, index)] = cursor + 1
            reply = entry.replies[cursor % len(entry.replies)].model_copy(deep=True)
            for call in reply.tool_calls or []:
                if call.call_id is None:
                    n = self._call_ids.get(conversation, 0)
                    self._call_ids[conversation] = n + 1
                    call.call_id = f"call_{n}"
        return reply


def complete(
    backend: Backend,
    messages: List[ChatMessage],
    tools: Optional[List[ToolSpec]] = None,
    sampling: Optional[Dict[str, Any]] = None,
    conversation: str = "default",
) -> ChatMessage:
    """Ask ``backend`` for one assistant message.

    Tool calls naming a tool outside ``tools`` are rejected here.
    """
    if not messages:
        raise ValueError("messages must not be empty")
    reply = backend.chat(list(messages), tools, dict(sampling or {}), conversation)
    offered = {spec.name for spec in tools or []}
    for call in reply.tool_calls or []:
        if call.name not in offered:
            raise UnknownToolError(f"backend called unknown tool '{call.name}'")
    return reply


def complete_n(
    backend: Backend,
    messages: List[ChatMessage],
    n: int,
    sampling: Optional[Dict[str, Any]] = None,
    conversation: str = "default",
    tools: Optional[List[ToolSpec]] = None,
) -> List[ChatMessage]:
    """``n`` independent completions, each with its own retry budget."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return [complete(backend, messages, tools, sampling, conversation) for _ in range(n)]


class BackendConfig(BaseModel):
    kind: Literal["http", "stub"] = "http"
    script: Optional[str] = None
    model: ModelConfig = Field(default_factory=ModelConfig)


def build_backend(config: BackendConfig, base_dir: Path | None = None) -> Backend:
    if config.kind == "stub":
        if not config.script:
            raise ValueError("stub backend needs a script path")
        path = Path(config.script)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return ScriptedStub.from_file(path)
    return HttpBackend(config.model)
