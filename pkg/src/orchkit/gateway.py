"""Single abstraction over every model call.

Two channels exist: a "cloud" channel used only while planning (never sees
documents) and a "local" channel used only while executing over documents.
The separation is enforced here with a phase tag: a cloud-phase gateway
refuses local_http profiles and a local-phase gateway refuses cloud_http
profiles, so no code path can cross the privacy boundary by configuration
accident.

Backends:
  * cloud_http  -- OpenAI-compatible chat-completions JSON over HTTP(S);
                   API key read from ORCH_CLOUD_API_KEY.
  * local_http  -- Ollama-compatible /api/chat JSON over HTTP; temperature
                   and num_ctx passed as options.
  * scripted    -- deterministic in-memory or recorded-session backend for
                   tests and air-gap rehearsal.

Record/replay sessions are JSON lines, one request/response pair per line,
keyed by a content digest of the request.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    BackendRefusalError,
    PhaseViolationError,
    TransportError,
    TruncatedError,
    UnseenRequestError,
)
from .model import FeatureSchema

PHASE_CLOUD = "cloud"
PHASE_LOCAL = "local"

KIND_CLOUD_HTTP = "cloud_http"
KIND_LOCAL_HTTP = "local_http"
KIND_SCRIPTED = "scripted"

CLOUD_API_KEY_ENV = "ORCH_CLOUD_API_KEY"

FINISH_REASONS = ("complete", "truncated", "error")


@dataclass(frozen=True)
class ChatRequest:
    """One single-shot model call; the pipeline never holds conversations."""

    system_prompt: str
    user_content: str
    temperature: float
    max_context_tokens: int
    response_schema: FeatureSchema | None = None

    def __post_init__(self):
        if not (0.0 <= self.temperature <= 2.0):
            raise ValueError(f"ChatRequest.temperature: must be in [0, 2], got {self.temperature}")
        if not isinstance(self.user_content, str) or not self.user_content.strip():
            raise ValueError("ChatRequest.user_content: must be non-empty")
        if self.max_context_tokens < 1:
            raise ValueError("ChatRequest.max_context_tokens: must be positive")


@dataclass(frozen=True)
class ChatResponse:
    raw_text: str
    finish_reason: str = "complete"
    latency_ms: float = 0.0
    retries: int = 0

    def __post_init__(self):
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(
                f"ChatResponse.finish_reason: must be one of {FINISH_REASONS}, "
                f"got {self.finish_reason!r}")


def request_digest(request: ChatRequest) -> str:
    """Stable content digest used to key scripted and recorded sessions."""
    schema = request.response_schema.to_dict() if request.response_schema else None
    payload = json.dumps(
        {"system_prompt": request.system_prompt,
         "user_content": request.user_content,
         "temperature": request.temperature,
         "max_context_tokens": request.max_context_tokens,
         "response_schema": schema},
        sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class BackendProfile:
    """Where and how a channel talks to a model.

    Factory classmethods bake in the operating defaults: cloud runs hot
    (temperature 0.8) to diversify planning output, local runs cold
    (temperature 0.2) with a 32k context for consistent extraction.
    """

    kind: str
    endpoint: str | None = None
    model: str | None = None
    default_temperature: float = 0.2
    default_context: int = 32768
    session: str | None = None
    backend: object | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        kinds = (KIND_CLOUD_HTTP, KIND_LOCAL_HTTP, KIND_SCRIPTED)
        if self.kind not in kinds:
            raise ValueError(f"BackendProfile.kind: must be one of {kinds}, got {self.kind!r}")
        if self.kind in (KIND_CLOUD_HTTP, KIND_LOCAL_HTTP) and not self.endpoint:
            raise ValueError(f"BackendProfile.endpoint: required for kind {self.kind!r}")
        if self.kind == KIND_SCRIPTED and self.backend is None and not self.session:
            raise ValueError("BackendProfile: scripted profile needs a backend or a session path")

    @classmethod
    def cloud(cls, endpoint: str, model: str, *, temperature: float = 0.8,
              context: int = 32768) -> "BackendProfile":
        return cls(kind=KIND_CLOUD_HTTP, endpoint=endpoint, model=model,
                   default_temperature=temperature, default_context=context)

    @classmethod
    def local(cls, endpoint: str, model: str, *, temperature: float = 0.2,
              context: int = 32768) -> "BackendProfile":
        return cls(kind=KIND_LOCAL_HTTP, endpoint=endpoint, model=model,
                   default_temperature=temperature, default_context=context)

    @classmethod
    def scripted(cls, backend: object | None = None, *, session: str | None = None,
                 model: str = "scripted", temperature: float = 0.2,
                 context: int = 32768) -> "BackendProfile":
        return cls(kind=KIND_SCRIPTED, model=model, default_temperature=temperature,
                   default_context=context, session=session, backend=backend)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

class ScriptedBackend:
    """Deterministic backend for tests: responses come from a handler
    callable or a digest-keyed mapping/sequence.

    Responses are pure (same request, same text). `fail_first` simulates
    transient transport faults: each distinct request fails that many times
    before succeeding, which exercises the retry policy.
    """

    def __init__(self, script: Callable[[ChatRequest], str] | Mapping[str, object] | None = None,
                 *, fail_first: int = 0):
        self._script = script
        self._fail_first = fail_first
        self._failures: dict[str, int] = {}
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()

    def _lookup(self, request: ChatRequest) -> str:
        if callable(self._script):
            return self._script(request)
        if self._script is None:
            raise UnseenRequestError("scripted backend has no script")
        digest = request_digest(request)
        if digest not in self._script:
            raise UnseenRequestError(f"no scripted response for request {digest[:12]}")
        entry = self._script[digest]
        if isinstance(entry, str):
            return entry
        with self._lock:  # sequence entry: serve in order, stick on the last
            i = self._cursor.get(digest, 0)
            self._cursor[digest] = min(i + 1, len(entry) - 1)
        return entry[i]

    def complete(self, request: ChatRequest) -> ChatResponse:
        if self._fail_first:
            digest = request_digest(request)
            with self._lock:
                n = self._failures.get(digest, 0)
                if n < self._fail_first:
                    self._failures[digest] = n + 1
                    raise TransportError(f"scripted transient failure {n + 1}/{self._fail_first}")
        return ChatResponse(raw_text=self._lookup(request))


class ReplayBackend:
    """Serves recorded responses byte-identically; unseen requests error."""

    def __init__(self, session_path: str | Path):
        self._path = Path(session_path)
        if not self._path.exists():
            raise TransportError(f"replay session not found: {self._path}")
        self._entries: dict[str, list[dict]] = {}
        with self._path.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                self._entries.setdefault(record["digest"], []).append(record["response"])
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        digest = request_digest(request)
        responses = self._entries.get(digest)
        if not responses:
            raise UnseenRequestError(f"no recorded response for request {digest[:12]}")
        with self._lock:
            i = self._cursor.get(digest, 0)
            self._cursor[digest] = min(i + 1, len(responses) - 1)
        data = responses[i]
        return ChatResponse(raw_text=data["raw_text"],
                            finish_reason=data.get("finish_reason", "complete"),
                            latency_ms=data.get("latency_ms", 0.0))


class RecordingBackend:
    """Wraps a live backend and appends request/response pairs to a session file."""

    def __init__(self, inner, session_path: str | Path):
        self._inner = inner
        self._path = Path(session_path)
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self._inner.complete(request)
        schema = request.response_schema.to_dict() if request.response_schema else None
        record = {
            "digest": request_digest(request),
            "request": {"system_prompt": request.system_prompt,
                        "user_content": request.user_content,
                        "temperature": request.temperature,
                        "max_context_tokens": request.max_context_tokens,
                        "response_schema": schema},
            "response": {"raw_text": response.raw_text,
                         "finish_reason": response.finish_reason,
                         "latency_ms": response.latency_ms},
        }
        with self._lock, self._path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
        return response


def _schema_to_json_schema(schema: FeatureSchema) -> dict:
    """Structured-output constraint: {"reasoning": ..., "values": {...}}."""
    properties: dict[str, dict] = {}
    for f in schema.fields:
        if f.kind == "text":
            properties[f.name] = {"type": "string"}
        else:
            allowed = list(f.legal_values()) + ["unknown"]
            properties[f.name] = {"type": "string", "enum": allowed}
    return {
        "type": "object",
        "properties": {
            "reasoning": {"type": "string"},
            "values": {"type": "object", "properties": properties,
                       "required": [f.name for f in schema.fields if f.required]},
        },
        "required": ["reasoning", "values"],
    }


class OpenAIChatBackend:
    """OpenAI-compatible chat-completions adapter (the cloud channel)."""

    def __init__(self, endpoint: str, model: str, *, timeout: float = 120.0,
                 api_key: str | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.timeout = timeout
        self.api_key = api_key if api_key is not None else os.environ.get(CLOUD_API_KEY_ENV, "")

    def complete(self, request: ChatRequest) -> ChatResponse:
        import requests

        payload: dict = {
            "model": self.model,
            "messages": [{"role": "system", "content": request.system_prompt},
                         {"role": "user", "content": request.user_content}],
            "temperature": request.temperature,
        }
        if request.response_schema is not None:
            payload["response_format"] = {"type": "json_object"}
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        started = time.perf_counter()
        try:
            resp = requests.post(f"{self.endpoint}/chat/completions", json=payload,
                                 headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            body = resp.json()
        except Exception as exc:  # noqa: BLE001 - every transport fault maps the same way
            raise TransportError(f"cloud chat call failed: {exc}") from exc
        latency = (time.perf_counter() - started) * 1000.0
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"] or ""
            finish = "truncated" if choice.get("finish_reason") == "length" else "complete"
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed chat-completions reply: {exc}") from exc
        return ChatResponse(raw_text=text, finish_reason=finish, latency_ms=latency)


class OllamaChatBackend:
    """Ollama-compatible /api/chat adapter (the local channel)."""

    def __init__(self, endpoint: str, model: str, *, timeout: float = 600.0):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.timeout = timeout

    def complete(self, request: ChatRequest) -> ChatResponse:
        import requests

        payload: dict = {
            "model": self.model,
            "messages": [{"role": "system", "content": request.system_prompt},
                         {"role": "user", "content": request.user_content}],
            "stream": False,
            "options": {"temperature": request.temperature,
                        "num_ctx": request.max_context_tokens},
        }
        if request.response_schema is not None:
            payload["format"] = _schema_to_json_schema(request.response_schema)
        started = time.perf_counter()
        try:
            resp = requests.post(f"{self.endpoint}/api/chat", json=payload,
                                 timeout=self.timeout)
            resp.raise_for_status()
            body = resp.json()
        except Exception as exc:  # noqa: BLE001
            raise TransportError(f"local chat call failed: {exc}") from exc
        latency = (time.perf_counter() - started) * 1000.0
        try:
            text = body["message"]["content"] or ""
        except (KeyError, TypeError) as exc:
            raise TransportError(f"malformed chat reply: {exc}") from exc
        finish = "truncated" if body.get("done_reason") == "length" else "complete"
        return ChatResponse(raw_text=text, finish_reason=finish, latency_ms=latency)


# ---------------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RetryPolicy:
    """Transient-transport retries: exponential backoff with jitter."""

    attempts: int = 3
    base_delay: float = 0.25
    max_delay: float = 2.0
    jitter: float = 0.1

    def delay(self, attempt: int) -> float:
        backoff = min(self.max_delay, self.base_delay * (2 ** attempt))
        return backoff * (1.0 + self.jitter * random.random())


def estimate_tokens(text: str) -> int:
    """Default token estimator: characters / 4, rounded up."""
    return (len(text) + 3) // 4


class Gateway:
    """A phase-tagged handle to one backend profile.

    Safe for concurrent use; in-flight requests are bounded per handle.
    """

    def __init__(self, profile: BackendProfile, phase: str, *,
                 retry: RetryPolicy | None = None, max_inflight: int = 4,
                 token_estimator: Callable[[str], int] = estimate_tokens,
                 sleep: Callable[[float], None] = time.sleep):
        if phase not in (PHASE_CLOUD, PHASE_LOCAL):
            raise ValueError(f"Gateway.phase: must be cloud or local, got {phase!r}")
        if phase == PHASE_CLOUD and profile.kind == KIND_LOCAL_HTTP:
            raise PhaseViolationError("cloud phase cannot use a local_http profile")
        if phase == PHASE_LOCAL and profile.kind == KIND_CLOUD_HTTP:
            raise PhaseViolationError("local phase cannot use a cloud_http profile")
        self.profile = profile
        self.phase = phase
        self.retry = retry or RetryPolicy()
        self._estimate = token_estimator
        self._sleep = sleep
        self._sem = threading.BoundedSemaphore(max_inflight)
        self._backend = self._resolve(profile)

    @staticmethod
    def _resolve(profile: BackendProfile):
        if profile.kind == KIND_SCRIPTED:
            if profile.backend is not None:
                return profile.backend
            return ReplayBackend(profile.session)  # type: ignore[arg-type]
        if profile.kind == KIND_CLOUD_HTTP:
            return OpenAIChatBackend(profile.endpoint, profile.model or "")
        return OllamaChatBackend(profile.endpoint, profile.model or "")

    def request(self, system_prompt: str, user_content: str, *,
                response_schema: FeatureSchema | None = None,
                temperature: float | None = None,
                max_context_tokens: int | None = None) -> ChatRequest:
        return ChatRequest(
            system_prompt=system_prompt,
            user_content=user_content,
            temperature=self.profile.default_temperature if temperature is None else temperature,
            max_context_tokens=(self.profile.default_context
                                if max_context_tokens is None else max_context_tokens),
            response_schema=response_schema)

    def chat(self, system_prompt: str, user_content: str, **kwargs) -> ChatResponse:
        return self.complete(self.request(system_prompt, user_content, **kwargs))

    def complete(self, request: ChatRequest) -> ChatResponse:
        estimated = self._estimate(request.system_prompt) + self._estimate(request.user_content)
        if estimated > request.max_context_tokens:
            raise TruncatedError(
                f"estimated {estimated} tokens exceeds the {request.max_context_tokens}-token window")
        last_error: TransportError | None = None
        with self._sem:
            for attempt in range(self.retry.attempts):
                try:
                    response = self._backend.complete(request)
                except TransportError as exc:
                    last_error = exc
                    if attempt + 1 < self.retry.attempts:
                        self._sleep(self.retry.delay(attempt))
                    continue
                if response.finish_reason == "truncated":
                    raise TruncatedError("backend reported a truncated completion")
                if not response.raw_text.strip():
                    raise BackendRefusalError("backend returned an empty completion")
                if attempt:
                    response = ChatResponse(raw_text=response.raw_text,
                                            finish_reason=response.finish_reason,
                                            latency_ms=response.latency_ms,
                                            retries=attempt)
                return response
        raise TransportError(
            f"gave up after {self.retry.attempts} attempts: {last_error}") from last_error


def record_and_replay(session_path: str | Path,
                      live: BackendProfile | None = None) -> BackendProfile:
    """Build a scripted profile around a session file.

    With `live` given, wraps that profile's backend and records every
    request/response pair to the session file; without it, replays the
    recorded session (unseen requests raise).
    """
    if live is not None:
        inner = Gateway._resolve(live)
        backend = RecordingBackend(inner, session_path)
        return BackendProfile.scripted(backend, model=live.model or "recorded",
                                       temperature=live.default_temperature,
                                       context=live.default_context)
    return BackendProfile.scripted(session=str(session_path))
