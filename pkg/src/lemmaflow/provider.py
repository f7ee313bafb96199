"""Completion providers: every agent role is a prompt over one of these.

``HttpChatProvider`` talks to any chat-completions style endpoint.
``ScriptedProvider`` replays canned texts so whole runs are reproducible
without model weights.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from abc import ABC, abstractmethod
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import httpx

log = logging.getLogger(__name__)


class Role(str, Enum):
    REASONER = "reasoner"
    SUMMARIZER = "summarizer"
    THEOREM_VERIFIER = "theorem_verifier"
    PROCESS_VERIFIER = "process_verifier"
    JUDGE = "judge"
    IMPROVER = "improver"


DEFAULT_TEMPERATURES = {
    Role.REASONER: 1.0,
    Role.SUMMARIZER: 1.0,
    Role.THEOREM_VERIFIER: 0.7,
    Role.PROCESS_VERIFIER: 0.7,
    Role.JUDGE: 0.0,
    Role.IMPROVER: 1.0,
}


class ProviderError(RuntimeError):
    retryable = False


class TransportError(ProviderError):
    retryable = True


class RateLimited(ProviderError):
    retryable = True

    def __init__(self, message: str, retry_after: Optional[float] = None):
        super().__init__(message)
        self.retry_after = retry_after


class BudgetExceeded(ProviderError):
    pass


class ScriptMiss(ProviderError):
    pass


class Exhausted(ProviderError):
    def __init__(self, last_error: Exception, attempts: int):
        super().__init__(f"gave up after {attempts} attempts: {last_error}")
        self.last_error = last_error
        self.attempts = attempts


@dataclass(frozen=True)
class Message:
    speaker: str
    text: str


@dataclass(frozen=True)
class CompletionRequest:
    role: Role
    messages: tuple
    max_tokens: int = 65536
    temperature: float = 1.0
    sample_count: int = 1
    seed: Optional[int] = None
    tags: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        msgs = tuple(m if isinstance(m, Message) else Message(*m) for m in self.messages)
        object.__setattr__(self, "messages", msgs)
        object.__setattr__(self, "tags", tuple(sorted(dict(self.tags).items())))
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @classmethod
    def prompt(cls, role, text: str, **kw) -> "CompletionRequest":
        return cls(role=role, messages=(Message("user", text),), **kw)

    @property
    def last_text(self) -> str:
        return self.messages[-1].text if self.messages else ""

    def tag(self, name: str, default=None):
        return dict(self.tags).get(name, default)

    def fingerprint(self) -> str:
        payload = json.dumps(
            [self.role.value, [[m.speaker, m.text] for m in self.messages]], ensure_ascii=False
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )


@dataclass(frozen=True)
class CompletionResult:
    samples: tuple
    usage: Usage = Usage()
    provider_meta: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "provider_meta", tuple(sorted(dict(self.provider_meta).items())))


class CompletionProvider(ABC):
    """The abstract chat policy. ``complete`` must be safe to call from many threads."""

    max_output_tokens: int = 65536

    def complete(self, req: CompletionRequest) -> CompletionResult:
        if req.max_tokens > self.max_output_tokens:
            raise BudgetExceeded(
                f"max_tokens {req.max_tokens} exceeds the output budget {self.max_output_tokens}"
            )
        result = self._complete(req)
        if len(result.samples) != req.sample_count:
            raise ProviderError(
                f"asked for {req.sample_count} samples, provider returned {len(result.samples)}"
            )
        return result

    @abstractmethod
    def _complete(self, req: CompletionRequest) -> CompletionResult:
        ...

    def describe(self) -> dict:
        return {"kind": type(self).__name__}


def _word_count(text: str) -> int:
    return len(text.split())


# ---------------------------------------------------------------- scripted


@dataclass
class ScriptEntry:
    """Canned responses for requests of one role.

    ``match`` is a regex searched in the request's last message and
    ``tags`` must all equal the request's tags. Responses are consumed in
    order; ``cycle`` repeats them forever.
    """

    role: Role
    responses: list
    match: Optional[str] = None
    tags: dict = field(default_factory=dict)
    cycle: bool = False
    cursor: int = 0

    def __post_init__(self):
        self.role = Role(self.role)
        self._pattern = re.compile(self.match, re.DOTALL) if self.match else None

    def accepts(self, req: CompletionRequest) -> bool:
        if req.role is not self.role:
            return False
        if any(req.tag(k) != v for k, v in self.tags.items()):
            return False
        if self._pattern is not None and not self._pattern.search(req.last_text):
            return False
        return self.cycle or self.cursor < len(self.responses)

    def take(self) -> str:
        text = self.responses[self.cursor % len(self.responses)]
        self.cursor += 1
        return text


class ScriptedProvider(CompletionProvider):
    """Deterministic provider replaying a script.

    Each sample of a request is drawn from the first entry that accepts it,
    so a request with ``sample_count=4`` reads four consecutive responses.
    Strict scripts raise ``ScriptMiss`` when nothing matches; lenient ones
    answer with ``default``.
    """

    def __init__(self, entries=(), strict: bool = True, default: str = "", max_output_tokens: int = 65536):
        self.entries = [e if isinstance(e, ScriptEntry) else ScriptEntry(**e) for e in entries]
        self.strict = strict
        self.default = default
        self.max_output_tokens = max_output_tokens
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path) -> "ScriptedProvider":
        """Load a JSON or YAML script. ``{"file": "x.txt"}`` responses are read relative to it."""
        import yaml

        path = Path(path)
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
        entries = []
        for raw in data.get("entries", []):
            raw = dict(raw)
            responses = []
            for r in raw.pop("responses"):
                if isinstance(r, dict):
                    responses.append((path.parent / r["file"]).read_text(encoding="utf-8"))
                else:
                    responses.append(str(r))
            entries.append(ScriptEntry(responses=responses, **raw))
        return cls(entries, strict=data.get("strict", True), default=data.get("default", ""))

    def _complete(self, req: CompletionRequest) -> CompletionResult:
        samples = []
        with self._lock:
            for _ in range(req.sample_count):
                entry = next((e for e in self.entries if e.accepts(req)), None)
                if entry is None:
                    if self.strict:
                        raise ScriptMiss(
                            f"no scripted response for role={req.role.value} tags={dict(req.tags)} "
                            f"fingerprint={req.fingerprint()}"
                        )
                    samples.append(self.default)
                else:
                    samples.append(entry.take())
        usage = Usage(
            _word_count(req.last_text) * req.sample_count, sum(_word_count(s) for s in samples)
        )
        return CompletionResult(samples, usage, {"provider": "scripted"})

    def describe(self) -> dict:
        return {"kind": "scripted", "entries": len(self.entries), "strict": self.strict}


# ---------------------------------------------------------------- http


class HttpChatProvider(CompletionProvider):
    """Chat-completions over HTTP+JSON (messages, temperature, n, max_tokens).

    When the server cannot produce ``n`` samples natively, set
    ``native_n=False`` and the samples are fetched by concurrent single
    calls, kept in submission order.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: Optional[str] = None,
        timeout: float = 600.0,
        native_n: bool = True,
        parallel_requests: int = 8,
        max_output_tokens: int = 65536,
        client: Optional[httpx.Client] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.native_n = native_n
        self.max_output_tokens = max_output_tokens
        self.parallel_requests = parallel_requests
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = client or httpx.Client(
            timeout=timeout,
            headers=headers,
            limits=httpx.Limits(max_connections=parallel_requests),
        )
        if client is not None:
            self._client.headers.update(headers)
        self._slots = threading.BoundedSemaphore(parallel_requests)

    def _payload(self, req: CompletionRequest, n: int) -> dict:
        body = {
            "model": self.model,
            "messages": [{"role": m.speaker, "content": m.text} for m in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "n": n,
        }
        if req.seed is not None:
            body["seed"] = req.seed
        return body

    def _post(self, body: dict) -> dict:
        with self._slots:
            try:
                resp = self._client.post(f"{self.base_url}/chat/completions", json=body)
            except httpx.TransportError as exc:
                raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code == 429:
            after = resp.headers.get("retry-after")
            try:
                delay = float(after) if after is not None else None
            except ValueError:
                delay = None
            raise RateLimited("rate limited (HTTP 429)", delay)
        if resp.status_code >= 500:
            raise TransportError(f"server error HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:500]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise TransportError(f"malformed JSON response: {exc}") from exc

    @staticmethod
    def _texts(data: dict) -> list:
        choices = sorted(data.get("choices", []), key=lambda c: c.get("index", 0))
        return [((c.get("message") or {}).get("content") or "") for c in choices]

    @staticmethod
    def _usage(data: dict) -> Usage:
        u = data.get("usage") or {}
        return Usage(int(u.get("prompt_tokens", 0)), int(u.get("completion_tokens", 0)))

    def _complete(self, req: CompletionRequest) -> CompletionResult:
        if self.native_n or req.sample_count == 1:
            data = self._post(self._payload(req, req.sample_count))
            texts = self._texts(data)
            if len(texts) != req.sample_count:
                raise ProviderError(f"endpoint returned {len(texts)} choices, wanted {req.sample_count}")
            return CompletionResult(texts, self._usage(data), {"model": data.get("model", self.model)})
        with ThreadPoolExecutor(max_workers=min(req.sample_count, self.parallel_requests)) as pool:
            datas = list(pool.map(lambda _: self._post(self._payload(req, 1)), range(req.sample_count)))
        texts = [self._texts(d)[0] if self._texts(d) else "" for d in datas]
        usage = Usage()
        for d in datas:
            usage = usage + self._usage(d)
        return CompletionResult(texts, usage, {"model": self.model})

    def describe(self) -> dict:
        return {"kind": "http", "base_url": self.base_url, "model": self.model, "native_n": self.native_n}

    def close(self):
        self._client.close()


def api_key_from_env(var: str = "LEMMAFLOW_API_KEY") -> Optional[str]:
    return os.environ.get(var) or None


# ---------------------------------------------------------------- wrappers


class RoleRouter(CompletionProvider):
    """Dispatch requests to a per-role provider; routing depends only on the role."""

    def __init__(self, default: CompletionProvider, routes: Optional[dict] = None):
        self.default = default
        self.routes = {Role(k): v for k, v in (routes or {}).items()}
        self.max_output_tokens = max(
            [default.max_output_tokens] + [p.max_output_tokens for p in self.routes.values()]
        )

    def route(self, role) -> CompletionProvider:
        return self.routes.get(Role(role), self.default)

    def _complete(self, req):
        return self.route(req.role).complete(req)

    def describe(self):
        return {
            "kind": "router",
            "default": self.default.describe(),
            "routes": {r.value: p.describe() for r, p in sorted(self.routes.items())},
        }


class ConcurrencyLimiter(CompletionProvider):
    """Caps the number of in-flight requests across all threads."""

    def __init__(self, inner: CompletionProvider, parallel_requests: int):
        if parallel_requests < 1:
            raise ValueError("parallel_requests must be >= 1")
        self.inner = inner
        self.parallel_requests = parallel_requests
        self.max_output_tokens = inner.max_output_tokens
        self._slots = threading.BoundedSemaphore(parallel_requests)

    def _complete(self, req):
        with self._slots:
            return self.inner.complete(req)

    def describe(self):
        return {"kind": "limited", "parallel_requests": self.parallel_requests, "inner": self.inner.describe()}


class TokenMeter(CompletionProvider):
    """Accumulates token usage per role (thread-safe)."""

    def __init__(self, inner: CompletionProvider):
        self.inner = inner
        self.max_output_tokens = inner.max_output_tokens
        self._lock = threading.Lock()
        self.by_role = defaultdict(Usage)
        self.calls = defaultdict(int)

    def _complete(self, req):
        result = self.inner.complete(req)
        with self._lock:
            self.by_role[req.role] = self.by_role[req.role] + result.usage
            self.calls[req.role] += 1
        return result

    def totals(self) -> dict:
        with self._lock:
            return {
                r.value: {
                    "calls": self.calls[r],
                    "prompt_tokens": u.prompt_tokens,
                    "completion_tokens": u.completion_tokens,
                }
                for r, u in sorted(self.by_role.items())
            }

    def describe(self):
        return self.inner.describe()


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 1.0
    max_delay: float = 60.0
    jitter: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def delay(self, attempt: int, rng: random.Random) -> float:
        base = min(self.max_delay, self.base_delay * 2 ** (attempt - 1))
        return base * (1 + self.jitter * rng.random())


def with_retry(
    provider: CompletionProvider,
    req: CompletionRequest,
    policy: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> CompletionResult:
    """Call ``provider.complete`` retrying transport failures and rate limits.

    Backoff is exponential with seeded jitter, so retry timing is reproducible.
    """
    rng = random.Random(policy.seed)
    last = None
    for attempt in range(1, policy.max_attempts + 1):
        try:
            return provider.complete(req)
        except (TransportError, RateLimited) as exc:
            last = exc
            if attempt == policy.max_attempts:
                break
            wait = policy.delay(attempt, rng)
            if isinstance(exc, RateLimited) and exc.retry_after is not None:
                wait = max(wait, exc.retry_after)
            log.warning("%s request failed (%s); retry %d in %.2fs", req.role.value, exc, attempt, wait)
            sleep(wait)
    raise Exhausted(last, policy.max_attempts)


class RetryingProvider(CompletionProvider):
    def __init__(self, inner: CompletionProvider, policy: RetryPolicy = RetryPolicy(), sleep=time.sleep):
        self.inner = inner
        self.policy = policy
        self.sleep = sleep
        self.max_output_tokens = inner.max_output_tokens

    def _complete(self, req):
        return with_retry(self.inner, req, self.policy, self.sleep)

    def describe(self):
        return self.inner.describe()
