"""Provider abstraction for chat-completion APIs.

One wire dialect (ordered message list in, text out) for every provider.
complete() owns the retry policy: exponential backoff from 1 s doubling per
attempt, at most 3 attempts, 30 s per attempt; auth failures never retry.
The clock is injected so simulations retry in virtual time.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Protocol

from convene.clock import Clock, WallClock
from convene.errors import (
    AuthFailure,
    ExhaustedRetries,
    RETRYABLE_PROVIDER_ERRORS,
)
from convene.model.types import SamplingParams

MAX_ATTEMPTS = 3
BACKOFF_BASE_SECONDS = 1.0
BACKOFF_FACTOR = 2.0
ATTEMPT_TIMEOUT_SECONDS = 30.0
PER_PROVIDER_CONCURRENCY = 8


@dataclass(frozen=True)
class ProviderConfig:
    providerId: str
    modelName: str = "default"
    endpointUrl: str | None = None
    authKeyRef: str | None = None
    samplingParams: SamplingParams = field(default_factory=SamplingParams)


@dataclass(frozen=True)
class ChatMessagePart:
    role: str  # system | user | assistant
    content: str


@dataclass
class ChatCompletionRequest:
    messages: list[ChatMessagePart]
    samplingParams: SamplingParams = field(default_factory=SamplingParams)

    def prompt_text(self) -> str:
        return "\n".join(m.content for m in self.messages)


@dataclass
class ChatCompletionResponse:
    content: str
    finishReason: str = "stop"
    latencyMs: float = 0.0
    tokenCounts: dict = field(default_factory=lambda: {"prompt": 0, "completion": 0})
    attempts: int = 1


class Provider(Protocol):
    def call(self, config: ProviderConfig, request: ChatCompletionRequest, timeout: float) -> ChatCompletionResponse:
        """One network round trip (or scripted lookup). May raise provider errors."""


class Gateway:
    """Routes completion requests to registered providers with retry."""

    def __init__(self, clock: Clock | None = None) -> None:
        self._clock = clock or WallClock()
        self._providers: dict[str, Provider] = {}
        self._limits: dict[str, threading.Semaphore] = {}

    def register(self, provider_id: str, provider: Provider, concurrency: int = PER_PROVIDER_CONCURRENCY) -> None:
        self._providers[provider_id] = provider
        self._limits[provider_id] = threading.Semaphore(concurrency)

    def has_provider(self, provider_id: str) -> bool:
        return provider_id in self._providers

    def complete(self, config: ProviderConfig, request: ChatCompletionRequest) -> ChatCompletionResponse:
        if not request.messages:
            raise ValueError("request messages must be non-empty")
        provider = self._providers.get(config.providerId)
        if provider is None:
            raise AuthFailure(f"no provider registered as {config.providerId!r}")
        limit = self._limits[config.providerId]
        last: Exception | None = None
        with limit:
            for attempt in range(1, MAX_ATTEMPTS + 1):
                started = self._clock.now()
                try:
                    response = provider.call(config, request, timeout=ATTEMPT_TIMEOUT_SECONDS)
                    response.latencyMs = max(response.latencyMs, (self._clock.now() - started) * 1000.0)
                    response.attempts = attempt
                    return response
                except AuthFailure:
                    raise
                except RETRYABLE_PROVIDER_ERRORS as e:
                    last = e
                    if attempt < MAX_ATTEMPTS:
                        self._clock.sleep(BACKOFF_BASE_SECONDS * (BACKOFF_FACTOR ** (attempt - 1)))
        raise ExhaustedRetries(MAX_ATTEMPTS, last)


class ScriptedProvider:
    """Deterministic provider for tests and headless simulation.

    Rules are ordered {match, response} pairs; the first rule whose `match`
    substring occurs in the prompt text wins. A rule with `once: true` is
    consumed by its first hit. Unmatched prompts get the default response.
    """

    def __init__(self, rules: list[dict] | None = None, default: str = "") -> None:
        self._rules = [dict(rule) for rule in (rules or [])]
        self._default = default
        self._lock = threading.Lock()
        self.calls = 0

    @classmethod
    def from_script(cls, script: dict) -> "ScriptedProvider":
        return cls(rules=script.get("rules", []), default=script.get("default", ""))

    def call(self, config: ProviderConfig, request: ChatCompletionRequest, timeout: float) -> ChatCompletionResponse:
        prompt = request.prompt_text()
        with self._lock:
            self.calls += 1
            for rule in self._rules:
                if rule.get("consumed"):
                    continue
                if rule.get("match", "") in prompt:
                    if rule.get("once"):
                        rule["consumed"] = True
                    return ChatCompletionResponse(content=rule.get("response", ""))
        return ChatCompletionResponse(content=self._default)


class FlakyProvider:
    """Fault-injection wrapper: raises scripted errors before succeeding."""

    def __init__(self, inner: Provider, failures: list[Exception]) -> None:
        self._inner = inner
        self._failures = list(failures)
        self.attempts = 0
        self.attempt_times: list[float] = []
        self._clock: Clock | None = None

    def observe_clock(self, clock: Clock) -> None:
        self._clock = clock

    def call(self, config: ProviderConfig, request: ChatCompletionRequest, timeout: float) -> ChatCompletionResponse:
        self.attempts += 1
        if self._clock is not None:
            self.attempt_times.append(self._clock.now())
        if self._failures:
            raise self._failures.pop(0)
        return self._inner.call(config, request, timeout)


class HttpProvider:
    """Chat-completions-over-HTTPS provider (OpenAI-compatible dialect)."""

    def __init__(self, resolve_key) -> None:
        self._resolve_key = resolve_key  # () -> str, called per request

    def call(self, config: ProviderConfig, request: ChatCompletionRequest, timeout: float) -> ChatCompletionResponse:
        import httpx

        from convene.errors import ProviderTimeout, RateLimited, TransientProviderError

        if config.endpointUrl is None:
            raise AuthFailure("provider has no endpoint configured")
        payload = {
            "model": config.modelName,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.samplingParams.temperature,
            "max_tokens": request.samplingParams.maxOutputTokens,
        }
        started = time.monotonic()
        try:
            response = httpx.post(
                config.endpointUrl,
                json=payload,
                headers={"Authorization": f"Bearer {self._resolve_key()}"},
                timeout=timeout,
            )
        except httpx.TimeoutException as e:
            raise ProviderTimeout(str(e)) from e
        except httpx.HTTPError as e:
            raise TransientProviderError(str(e)) from e
        if response.status_code in (401, 403):
            raise AuthFailure(f"provider rejected credentials ({response.status_code})")
        if response.status_code == 429:
            raise RateLimited("provider rate limit")
        if response.status_code >= 500:
            raise TransientProviderError(f"provider error {response.status_code}")
        body = response.json()
        choice = body["choices"][0]
        usage = body.get("usage", {})
        return ChatCompletionResponse(
            content=choice["message"]["content"],
            finishReason=choice.get("finish_reason", "stop"),
            latencyMs=(time.monotonic() - started) * 1000.0,
            tokenCounts={
                "prompt": usage.get("prompt_tokens", 0),
                "completion": usage.get("completion_tokens", 0),
            },
        )
