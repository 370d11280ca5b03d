"""Chat-backend gateway: digested requests, replay scripts, caching, limits.

Every request has a stable content digest, which keys both the replay script
used in tests and the on-disk response cache. Auth material is read from the
environment at call time and never serialized into logs or cache entries.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import requests

from .errors import (
    AuthMissing,
    GatewayError,
    RateLimitedExhausted,
    ScriptMiss,
    TransportError,
)
from .util import canonical_json, sha256_text

logger = logging.getLogger(__name__)

_ROLES = ("system", "user", "assistant")


def estimate_tokens(text: str) -> int:
    """Character-count heuristic: one token per four characters, rounded up."""
    return math.ceil(len(text) / 4)


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_output_tokens: int = 2048
    seed: int | None = None

    def __post_init__(self):
        if not self.model_id:
            raise ValueError("model_id must be non-empty")
        if not self.messages:
            raise ValueError("at least one message required")
        for role, _ in self.messages:
            if role not in _ROLES:
                raise ValueError(f"unknown role {role!r}")
        if not any(role == "user" for role, _ in self.messages):
            raise ValueError("at least one user message required")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature out of range [0, 2]")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    @property
    def digest(self) -> str:
        payload = {
            "model_id": self.model_id,
            "messages": [[role, text] for role, text in self.messages],
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "seed": self.seed,
        }
        return sha256_text(canonical_json(payload))

    def prompt_text(self) -> str:
        return "\n\n".join(text for _, text in self.messages)


def user_request(model_id: str, text: str, **kwargs) -> ChatRequest:
    """Convenience builder for a single-user-message request."""
    return ChatRequest(model_id=model_id, messages=(("user", text),), **kwargs)


@dataclass
class ChatResponse:
    text: str
    prompt_tokens: int
    output_tokens: int
    backend_id: str
    cached: bool = False
    error: str | None = None

    def __post_init__(self):
        # Empty text is only legal when an error record explains it.
        if not self.text and self.error is None:
            raise ValueError("empty response text without an error record")


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    base_backoff_s: float = 0.5


@dataclass
class BackendConfig:
    name: str
    endpoint: str
    auth_env_var: str
    max_in_flight: int = 4
    requests_per_minute: int = 60
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    # Dotted paths into the provider response body.
    text_path: str = "choices.0.message.content"
    prompt_tokens_path: str = "usage.prompt_tokens"
    output_tokens_path: str = "usage.completion_tokens"


# --- replay -----------------------------------------------------------------

@dataclass
class ReplayEntry:
    response_text: str
    digest: str | None = None
    prompt_pattern: str | None = None


class ReplayScript:
    """Scripted responses keyed by request digest or prompt regex.

    Digest entries match exactly; pattern entries are tried in file order
    against the request's prompt text. `default_policy` decides what a miss
    does: "error" raises ScriptMiss, "fixed" returns `default_text`.
    """

    def __init__(
        self,
        entries: list[ReplayEntry],
        default_policy: str = "error",
        default_text: str = "",
    ) -> None:
        if default_policy not in ("error", "fixed"):
            raise ValueError(f"unknown replay policy {default_policy!r}")
        self.default_policy = default_policy
        self.default_text = default_text
        self._by_digest: dict[str, str] = {}
        self._patterns: list[tuple[re.Pattern, str]] = []
        for entry in entries:
            if entry.digest:
                if entry.digest in self._by_digest:
                    raise ValueError(f"duplicate digest in replay script: {entry.digest}")
                self._by_digest[entry.digest] = entry.response_text
            elif entry.prompt_pattern:
                self._patterns.append((re.compile(entry.prompt_pattern), entry.response_text))
            else:
                raise ValueError("replay entry needs a digest or a prompt_pattern")

    @classmethod
    def load(
        cls,
        path: Path | str,
        default_policy: str = "error",
        default_text: str = "",
    ) -> "ReplayScript":
        entries = []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            entries.append(
                ReplayEntry(
                    response_text=rec["response_text"],
                    digest=rec.get("digest"),
                    prompt_pattern=rec.get("prompt_pattern"),
                )
            )
        return cls(entries, default_policy=default_policy, default_text=default_text)

    def lookup(self, request: ChatRequest) -> str:
        hit = self._by_digest.get(request.digest)
        if hit is not None:
            return hit
        prompt = request.prompt_text()
        for pattern, text in self._patterns:
            if pattern.search(prompt):
                return text
        if self.default_policy == "fixed":
            return self.default_text
        raise ScriptMiss(f"no replay entry for digest {request.digest[:12]}…")


# --- cache --------------------------------------------------------------------

class ResponseCache:
    """Content-addressed response store under cache/<aa>/<key>.json.

    The key covers the request digest and the backend name, so the same
    prompt against two backends never collides. Corrupt entries are treated
    as misses with a warning.
    """

    def __init__(self, root: Path | str) -> None:
        self.root = Path(root)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _lock(self, key: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(key, threading.Lock())

    @staticmethod
    def key_for(request: ChatRequest, backend: BackendConfig) -> str:
        return sha256_text(f"{request.digest}:{backend.name}")

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, request: ChatRequest, backend: BackendConfig) -> ChatResponse | None:
        key = self.key_for(request, backend)
        path = self._path(key)
        with self._lock(key):
            if not path.is_file():
                return None
            try:
                entry = json.loads(path.read_text(encoding="utf-8"))
                body = entry["response"]
                if entry["integrity"] != sha256_text(canonical_json(body)):
                    raise ValueError("integrity hash mismatch")
                return ChatResponse(
                    text=body["text"],
                    prompt_tokens=body["prompt_tokens"],
                    output_tokens=body["output_tokens"],
                    backend_id=body["backend_id"],
                    cached=True,
                    error=body.get("error"),
                )
            except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
                logger.warning("corrupt cache entry %s treated as miss: %s", path, exc)
                return None

    def put(self, request: ChatRequest, backend: BackendConfig, response: ChatResponse) -> None:
        key = self.key_for(request, backend)
        path = self._path(key)
        body = {
            "text": response.text,
            "prompt_tokens": response.prompt_tokens,
            "output_tokens": response.output_tokens,
            "backend_id": response.backend_id,
            "error": response.error,
        }
        entry = {
            "request": {"digest": request.digest, "model_id": request.model_id},
            "response": body,
            "integrity": sha256_text(canonical_json(body)),
        }
        with self._lock(key):
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(entry, ensure_ascii=False, indent=1), encoding="utf-8")


# --- rate limiting -------------------------------------------------------------

class RateLimiter:
    """Sliding-window limiter: at most `per_minute` acquisitions per 60s."""

    def __init__(
        self,
        per_minute: int,
        time_fn: Callable[[], float] = time.monotonic,
        sleep_fn: Callable[[float], None] = time.sleep,
    ) -> None:
        self.per_minute = per_minute
        self._time = time_fn
        self._sleep = sleep_fn
        self._issued: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Block until a slot is free; returns the issue timestamp."""
        while True:
            with self._lock:
                now = self._time()
                while self._issued and self._issued[0] <= now - 60.0:
                    self._issued.popleft()
                if len(self._issued) < self.per_minute:
                    self._issued.append(now)
                    return now
                wait = self._issued[0] + 60.0 - now
            self._sleep(max(wait, 0.001))


# --- transport and completion ---------------------------------------------------

def _http_transport(url: str, payload: dict, headers: dict) -> tuple[int, object]:
    try:
        resp = requests.post(url, json=payload, headers=headers, timeout=120)
    except requests.RequestException as exc:
        raise ConnectionError(str(exc)) from exc
    try:
        body = resp.json()
    except ValueError:
        body = resp.text
    return resp.status_code, body


def _dig(body: object, dotted: str):
    cur = body
    for part in dotted.split("."):
        if isinstance(cur, list):
            cur = cur[int(part)]
        elif isinstance(cur, dict):
            cur = cur[part]
        else:
            raise KeyError(dotted)
    return cur


def complete(
    request: ChatRequest,
    backend: BackendConfig,
    *,
    replay: ReplayScript | None = None,
    transport: Callable | None = None,
    limiter: RateLimiter | None = None,
    sleep_fn: Callable[[float], None] = time.sleep,
) -> ChatResponse:
    """Run one request against the replay script or the live backend."""
    if replay is not None:
        text = replay.lookup(request)
        return ChatResponse(
            text=text,
            prompt_tokens=estimate_tokens(request.prompt_text()),
            output_tokens=estimate_tokens(text),
            backend_id=backend.name,
        )

    token = os.environ.get(backend.auth_env_var, "")
    if not token:
        raise AuthMissing(f"environment variable {backend.auth_env_var} not set")
    transport = transport or _http_transport
    payload = {
        "model": request.model_id,
        "messages": [{"role": role, "content": text} for role, text in request.messages],
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    }
    if request.seed is not None:
        payload["seed"] = request.seed
    headers = {"Authorization": f"Bearer {token}"}

    attempts = max(1, backend.retry.max_attempts)
    last_failure = ""
    rate_limited = False
    for attempt in range(attempts):
        if attempt:
            sleep_fn(backend.retry.base_backoff_s * (2 ** (attempt - 1)))
        if limiter is not None:
            limiter.acquire()
        try:
            status, body = transport(backend.endpoint, payload, headers)
        except ConnectionError as exc:
            last_failure = f"transport: {exc}"
            continue
        if status == 429 or status >= 500:
            rate_limited = status == 429
            last_failure = f"HTTP {status}"
            continue
        if status != 200:
            raise TransportError(f"HTTP {status}: {str(body)[:200]}")
        try:
            text = str(_dig(body, backend.text_path))
        except (KeyError, IndexError, ValueError) as exc:
            raise TransportError(f"cannot extract response text: {exc}") from exc
        try:
            prompt_tokens = int(_dig(body, backend.prompt_tokens_path))
        except (KeyError, IndexError, ValueError, TypeError):
            prompt_tokens = estimate_tokens(request.prompt_text())
        try:
            output_tokens = int(_dig(body, backend.output_tokens_path))
        except (KeyError, IndexError, ValueError, TypeError):
            output_tokens = estimate_tokens(text)
        return ChatResponse(
            text=text,
            prompt_tokens=prompt_tokens,
            output_tokens=output_tokens,
            backend_id=backend.name,
        )
    if rate_limited:
        raise RateLimitedExhausted(f"retries exhausted: {last_failure}")
    raise TransportError(f"retries exhausted: {last_failure}")


def complete_cached(
    request: ChatRequest,
    backend: BackendConfig,
    cache: ResponseCache,
    **kwargs,
) -> ChatResponse:
    """complete() with a read-through content-addressed cache."""
    hit = cache.get(request, backend)
    if hit is not None:
        return hit
    response = complete(request, backend, **kwargs)
    cache.put(request, backend, response)
    return response


class Gateway:
    """Bounded-parallel, rate-limited front end over one backend.

    Wraps complete()/complete_cached() with shared limiter state so batch
    callers cannot exceed `max_in_flight` or `requests_per_minute`.
    """

    def __init__(
        self,
        backend: BackendConfig,
        *,
        replay: ReplayScript | None = None,
        cache: ResponseCache | None = None,
        transport: Callable | None = None,
        time_fn: Callable[[], float] = time.monotonic,
        sleep_fn: Callable[[float], None] = time.sleep,
    ) -> None:
        self.backend = backend
        self.replay = replay
        self.cache = cache
        self._transport = transport
        self._sleep = sleep_fn
        self._limiter = RateLimiter(backend.requests_per_minute, time_fn, sleep_fn)

    def complete(self, request: ChatRequest) -> ChatResponse:
        if self.cache is not None:
            hit = self.cache.get(request, self.backend)
            if hit is not None:
                return hit
        response = complete(
            request,
            self.backend,
            replay=self.replay,
            transport=self._transport,
            limiter=None if self.replay is not None else self._limiter,
            sleep_fn=self._sleep,
        )
        if self.cache is not None:
            self.cache.put(request, self.backend, response)
        return response

    def submit_batch(self, requests_by_key: Mapping[object, ChatRequest]) -> dict:
        """Run independent requests concurrently; failures come back per key."""
        results: dict = {}
        workers = max(1, self.backend.max_in_flight)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {key: pool.submit(self.complete, req) for key, req in requests_by_key.items()}
            for key, future in futures.items():
                try:
                    results[key] = future.result()
                except GatewayError as exc:
                    results[key] = exc
        return results
