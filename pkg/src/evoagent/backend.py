"""Completion backends: a deterministic scripted one and an OpenAI-compatible HTTP client."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import httpx

from .core import token_count

log = logging.getLogger(__name__)

CALL_SITES = ("select", "compress", "selector", "fold", "align", "distill", "generate")

DEFAULT_MAX_TOKENS = 1024
DEFAULT_TEMPERATURE = 0.7


class BackendError(RuntimeError):
    pass


class ScenarioExhausted(BackendError):
    def __init__(self, call_site: str, occurrence: int):
        super().__init__(f"no scripted response for {call_site}#{occurrence}")
        self.call_site = call_site
        self.occurrence = occurrence


class TransportError(BackendError):
    pass


class ProviderError(BackendError):
    def __init__(self, status: int, body: str):
        super().__init__(f"provider returned HTTP {status}: {body}")
        self.status = status
        self.body = body


@dataclass(frozen=True)
class CompletionRequest:
    call_site: str
    messages: tuple[tuple[str, str], ...]
    max_tokens: int = DEFAULT_MAX_TOKENS
    temperature: float = DEFAULT_TEMPERATURE
    stop: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.call_site not in CALL_SITES:
            raise ValueError(f"unknown call_site {self.call_site!r}")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        object.__setattr__(self, "messages", tuple((r, t) for r, t in self.messages))
        if self.stop is not None:
            object.__setattr__(self, "stop", tuple(self.stop))

    @property
    def prompt(self) -> str:
        """The last user message, which is what scripted policies read."""
        for role, text in reversed(self.messages):
            if role == "user":
                return text
        return ""


@dataclass(frozen=True)
class Completion:
    text: str
    prompt_tokens: int
    completion_tokens: int


class Backend(Protocol):
    def complete(self, request: CompletionRequest) -> Completion: ...


def prompt_tokens_of(request: CompletionRequest) -> int:
    return sum(token_count(text) for _, text in request.messages)


# --- scripted backend -------------------------------------------------------

Policy = Callable[[CompletionRequest], "str | None"]


@dataclass
class ScriptedScenario:
    """Responses addressed by ``(call_site, occurrence_index)``.

    Lookup order: explicit entry, then the call site's policy, then the call
    site default, then ``default_response``. Anything else raises
    :class:`ScenarioExhausted`.
    """

    entries: dict[tuple[str, int], str] = field(default_factory=dict)
    default_response: str | None = None
    site_defaults: dict[str, str] = field(default_factory=dict)
    policies: dict[str, Policy] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "ScriptedScenario":
        from .policies import get_policy

        d = d or {}
        entries: dict[tuple[str, int], str] = {}
        for site, spec in (d.get("entries") or {}).items():
            if site not in CALL_SITES:
                raise ValueError(f"unknown call_site {site!r} in script entries")
            items = enumerate(spec) if isinstance(spec, list) else ((int(k), v) for k, v in spec.items())
            for idx, text in items:
                if text is not None:
                    entries[(site, int(idx))] = text
        for site in list(d.get("defaults") or {}) + list(d.get("policies") or {}):
            if site not in CALL_SITES:
                raise ValueError(f"unknown call_site {site!r} in script")
        return cls(
            entries=entries,
            default_response=d.get("default_response"),
            site_defaults=dict(d.get("defaults") or {}),
            policies={site: get_policy(name) for site, name in (d.get("policies") or {}).items()},
        )


class ScriptedBackend:
    """Deterministic backend; ignores temperature, counts occurrences per call site."""

    def __init__(self, scenario: ScriptedScenario | None = None):
        self.scenario = scenario or ScriptedScenario()
        self._counts: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> Completion:
        with self._lock:
            occurrence = self._counts[request.call_site]
            self._counts[request.call_site] += 1
        text = self._lookup(request, occurrence)
        return Completion(text, prompt_tokens_of(request), token_count(text))

    def _lookup(self, request: CompletionRequest, occurrence: int) -> str:
        sc = self.scenario
        site = request.call_site
        if (site, occurrence) in sc.entries:
            return sc.entries[(site, occurrence)]
        policy = sc.policies.get(site)
        if policy is not None:
            text = policy(request)
            if text is not None:
                return text
        if site in sc.site_defaults:
            return sc.site_defaults[site]
        if sc.default_response is not None:
            return sc.default_response
        raise ScenarioExhausted(site, occurrence)


class UnavailableBackend:
    """Always fails; stands in for a missing compressor or analyzer."""

    def complete(self, request: CompletionRequest) -> Completion:
        raise BackendError("backend unavailable")


# --- HTTP backend -----------------------------------------------------------


@dataclass
class HTTPConfig:
    base_url: str
    model: str
    api_key: str | None = field(default=None, repr=False)
    timeout_s: float = 60.0
    attempts: int = 3
    backoff_s: float = 0.5
    backoff_cap_s: float = 4.0

    @classmethod
    def from_dict(cls, d: Mapping, env: Mapping[str, str] | None = None) -> "HTTPConfig":
        env = os.environ if env is None else env
        known = {"base_url", "model", "api_key", "timeout_s", "attempts", "backoff_s", "backoff_cap_s"}
        unknown = set(d) - known
        if unknown:
            raise KeyError(sorted(unknown)[0])
        base_url = env.get("EVOAGENT_BASE_URL") or d.get("base_url")
        if not base_url:
            raise KeyError("base_url")
        if not d.get("model"):
            raise KeyError("model")
        return cls(
            base_url=base_url,
            model=d["model"],
            api_key=env.get("EVOAGENT_API_KEY") or d.get("api_key"),
            timeout_s=float(d.get("timeout_s", 60.0)),
            attempts=int(d.get("attempts", 3)),
            backoff_s=float(d.get("backoff_s", 0.5)),
            backoff_cap_s=float(d.get("backoff_cap_s", 4.0)),
        )


def request_body(request: CompletionRequest, model: str) -> bytes:
    body: dict = {
        "model": model,
        "messages": [{"role": role, "content": text} for role, text in request.messages],
        "max_tokens": request.max_tokens,
        "temperature": request.temperature,
    }
    if request.stop:
        body["stop"] = list(request.stop)
    return json.dumps(body, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


_TRANSIENT_STATUS = {408, 409, 429, 500, 502, 503, 504}


class HTTPBackend:
    """Client for ``POST {base_url}/v1/chat/completions``."""

    def __init__(self, config: HTTPConfig, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout_s)
        self._sleep = sleep

    @property
    def url(self) -> str:
        base = self.config.base_url.rstrip("/")
        if base.endswith("/v1"):
            base = base[:-3]
        return base + "/v1/chat/completions"

    def complete(self, request: CompletionRequest) -> Completion:
        body = request_body(request, self.config.model)
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"

        last: BackendError | None = None
        for attempt in range(self.config.attempts):
            if attempt:
                self._sleep(min(self.config.backoff_cap_s, self.config.backoff_s * 2 ** (attempt - 1)))
            try:
                resp = self._client.post(self.url, content=body, headers=headers)
            except httpx.TransportError as exc:
                last = TransportError(f"{type(exc).__name__}: {exc}")
                log.warning("%s call failed (attempt %d): %s", request.call_site, attempt + 1, last)
                continue
            if resp.status_code in _TRANSIENT_STATUS:
                last = ProviderError(resp.status_code, resp.text)
                log.warning("%s call got HTTP %d (attempt %d)", request.call_site, resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise ProviderError(resp.status_code, resp.text)
            return self._parse(request, resp)
        assert last is not None
        raise last

    @staticmethod
    def _parse(request: CompletionRequest, resp: httpx.Response) -> Completion:
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError):
            raise ProviderError(resp.status_code, resp.text) from None
        usage = data.get("usage") or {}
        return Completion(
            text,
            int(usage.get("prompt_tokens", prompt_tokens_of(request))),
            int(usage.get("completion_tokens", token_count(text))),
        )

    def close(self) -> None:
        self._client.close()


class UsageMeter:
    """Wraps a backend and accumulates token usage per call site."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.prompt_tokens: dict[str, int] = defaultdict(int)
        self.completion_tokens: dict[str, int] = defaultdict(int)
        self.calls: dict[str, int] = defaultdict(int)

    def complete(self, request: CompletionRequest) -> Completion:
        out = self.inner.complete(request)
        self.calls[request.call_site] += 1
        self.prompt_tokens[request.call_site] += out.prompt_tokens
        self.completion_tokens[request.call_site] += out.completion_tokens
        return out

    def totals(self) -> dict[str, int]:
        return {
            "prompt_tokens": sum(self.prompt_tokens.values()),
            "completion_tokens": sum(self.completion_tokens.values()),
        }


def simple_request(call_site: str, system: str, user: str, max_tokens: int = DEFAULT_MAX_TOKENS,
                   temperature: float = DEFAULT_TEMPERATURE, stop: Sequence[str] | None = None) -> CompletionRequest:
    return CompletionRequest(call_site, (("system", system), ("user", user)), max_tokens, temperature,
                             tuple(stop) if stop else None)
