"""Gateway to text-completion backends.

The gateway owns everything between a rendered prompt and a usable completion:
stop-marker truncation, token-budget clipping, finish reasons, retry policy and
per-backend parallelism. Backends only turn a request into raw text; mock
backends make every pipeline above this module deterministic.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

from .prompting import estimate_tokens

FINISH_STOP = "stop_marker"
FINISH_LENGTH = "length_limit"
FINISH_END = "backend_end"


class BackendError(Exception):
    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


class RetriesExhausted(BackendError):
    def __init__(self, backend_id: str, attempts: list[BackendError]):
        detail = "; ".join(str(e) for e in attempts)
        super().__init__(
            f"backend {backend_id!r} failed after {len(attempts)} attempt(s): {detail}",
            retryable=False,
        )
        self.backend_id = backend_id
        self.attempts = attempts


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    max_new_tokens: int = 256
    temperature: float = 0.7
    top_p: float = 0.9
    stop_markers: tuple[str, ...] = ()
    backend_id: str = "default"

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")


@dataclass(frozen=True)
class Completion:
    text: str
    finish_reason: str
    latency_ms: float = 0.0
    backend_id: str = "default"
    attempts: int = 1


def _clip_to_budget(raw: str, budget: int) -> str:
    """Longest word-prefix whose token estimate fits the budget."""
    spans = [m.span() for m in re.finditer(r"\S+", raw)]
    keep = min(len(spans), (20 * budget) // 27)
    if keep == 0:
        return ""
    return raw[: spans[keep - 1][1]]


def finalize(raw: str, request: GenerationRequest) -> tuple[str, str]:
    """Apply stop markers and the generation budget to raw backend text."""
    cut: int | None = None
    for marker in request.stop_markers:
        idx = raw.find(marker)
        if idx != -1 and (cut is None or idx < cut):
            cut = idx
    if cut is not None:
        return raw[:cut], FINISH_STOP
    if estimate_tokens(raw) > request.max_new_tokens:
        return _clip_to_budget(raw, request.max_new_tokens), FINISH_LENGTH
    return raw, FINISH_END


class Backend(Protocol):
    def generate(self, request: GenerationRequest) -> str:  # pragma: no cover
        ...


class ScriptBackend:
    """Replays scripted responses in order.

    Entries: a plain string is emitted followed by the request's first stop
    marker (a clean end of turn); ``{"text": ..., "append_marker": false}``
    is emitted raw; ``{"error": ..., "retryable": bool}`` raises.
    """

    def __init__(self, entries: Sequence, loop: bool = False):
        self._entries = list(entries)
        self._loop = loop
        self._pos = 0
        self._lock = threading.Lock()

    def generate(self, request: GenerationRequest) -> str:
        with self._lock:
            if self._pos >= len(self._entries):
                if not self._loop or not self._entries:
                    raise BackendError("script exhausted", retryable=False)
                self._pos = 0
            entry = self._entries[self._pos]
            self._pos += 1
        if isinstance(entry, str):
            marker = request.stop_markers[0] if request.stop_markers else ""
            return entry + marker
        if "error" in entry:
            raise BackendError(str(entry["error"]), retryable=bool(entry.get("retryable", True)))
        text = entry["text"]
        if entry.get("append_marker", False) and request.stop_markers:
            text += request.stop_markers[0]
        return text


def hash_prompt(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class MapBackend:
    """Maps prompt hashes (or raw prompts) to fixed responses."""

    def __init__(self, responses: dict[str, str], default: str | None = None, hashed: bool = True):
        self._responses = dict(responses)
        self._default = default
        self._hashed = hashed

    def generate(self, request: GenerationRequest) -> str:
        key = hash_prompt(request.prompt) if self._hashed else request.prompt
        text = self._responses.get(key, self._default)
        if text is None:
            raise BackendError(f"no scripted response for prompt key {key[:12]}", retryable=False)
        marker = request.stop_markers[0] if request.stop_markers else ""
        return text + marker


class FunctionBackend:
    """Adapts ``fn(request) -> str`` (fault injection, adaptive mocks)."""

    def __init__(self, fn: Callable[[GenerationRequest], str]):
        self._fn = fn

    def generate(self, request: GenerationRequest) -> str:
        return self._fn(request)


class HttpBackend:
    """POSTs completion requests to an HTTP endpoint.

    The request body is ``{"prompt", "max_new_tokens", "temperature", "top_p",
    "stop"}`` plus an optional ``model``. Responses may carry the text at
    ``text``, ``content`` or ``choices[0].text``/``choices[0].message.content``.
    """

    def __init__(
        self,
        url: str,
        model: str | None = None,
        auth_env: str | None = None,
        timeout: float = 60.0,
    ):
        self.url = url
        self.model = model
        self.auth_env = auth_env
        self.timeout = timeout
        self._client = None
        self._lock = threading.Lock()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.auth_env:
            token = os.environ.get(self.auth_env, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def _get_client(self):
        import httpx

        with self._lock:
            if self._client is None:
                self._client = httpx.Client(timeout=self.timeout)
        return self._client

    def generate(self, request: GenerationRequest) -> str:
        import httpx

        body = {
            "prompt": request.prompt,
            "max_new_tokens": request.max_new_tokens,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "stop": list(request.stop_markers),
        }
        if self.model:
            body["model"] = self.model
        try:
            response = self._get_client().post(self.url, json=body, headers=self._headers())
        except httpx.HTTPError as exc:
            raise BackendError(f"transport failure: {exc}", retryable=True) from exc
        if response.status_code >= 500 or response.status_code == 429:
            raise BackendError(f"backend status {response.status_code}", retryable=True)
        if response.status_code >= 400:
            raise BackendError(f"backend status {response.status_code}", retryable=False)
        try:
            payload = response.json()
        except ValueError as exc:
            raise BackendError("backend returned non-JSON body", retryable=False) from exc
        return _extract_text(payload)


def _extract_text(payload: dict) -> str:
    if isinstance(payload, dict):
        if isinstance(payload.get("text"), str):
            return payload["text"]
        if isinstance(payload.get("content"), str):
            return payload["content"]
        choices = payload.get("choices")
        if isinstance(choices, list) and choices:
            first = choices[0]
            if isinstance(first, dict):
                if isinstance(first.get("text"), str):
                    return first["text"]
                message = first.get("message")
                if isinstance(message, dict) and isinstance(message.get("content"), str):
                    return message["content"]
    raise BackendError("unrecognized backend response shape", retryable=False)


class BackendRegistry:
    """Named backends plus completion post-processing and retries."""

    def __init__(self) -> None:
        self._backends: dict[str, Backend] = {}
        self._semaphores: dict[str, threading.BoundedSemaphore] = {}

    def register(self, backend_id: str, backend: Backend, parallelism: int | None = None) -> None:
        if parallelism is not None and parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        self._backends[backend_id] = backend
        if parallelism is not None:
            self._semaphores[backend_id] = threading.BoundedSemaphore(parallelism)

    def backend_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self._backends))

    def _backend(self, backend_id: str) -> Backend:
        try:
            return self._backends[backend_id]
        except KeyError:
            raise BackendError(f"unknown backend {backend_id!r}", retryable=False) from None

    def complete(self, request: GenerationRequest) -> Completion:
        backend = self._backend(request.backend_id)
        semaphore = self._semaphores.get(request.backend_id)
        start = time.perf_counter()
        if semaphore is not None:
            with semaphore:
                raw = backend.generate(request)
        else:
            raw = backend.generate(request)
        latency = (time.perf_counter() - start) * 1000.0
        text, reason = finalize(raw, request)
        return Completion(
            text=text, finish_reason=reason, latency_ms=latency, backend_id=request.backend_id
        )

    def complete_with_retry(self, request: GenerationRequest, max_retries: int = 1) -> Completion:
        """Retry retryable failures up to ``max_retries`` extra attempts."""
        failures: list[BackendError] = []
        for attempt in range(1 + max_retries):
            try:
                completion = self.complete(request)
            except RetriesExhausted:
                raise
            except BackendError as exc:
                failures.append(exc)
                if not exc.retryable:
                    raise RetriesExhausted(request.backend_id, failures) from exc
                continue
            return Completion(
                text=completion.text,
                finish_reason=completion.finish_reason,
                latency_ms=completion.latency_ms,
                backend_id=completion.backend_id,
                attempts=attempt + 1,
            )
        raise RetriesExhausted(request.backend_id, failures)


def load_script(path: Path | str) -> list:
    """Read a mock script: JSONL, one entry (string or object) per line."""
    entries = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                entries.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"bad script line {line_no}: {exc}") from None
    return entries
