"""Provider-agnostic LLM access with retries, throttling, and scripting."""

from convene.llm.gateway import (
    ATTEMPT_TIMEOUT_SECONDS,
    BACKOFF_BASE_SECONDS,
    BACKOFF_FACTOR,
    MAX_ATTEMPTS,
    PER_PROVIDER_CONCURRENCY,
    ChatCompletionRequest,
    ChatCompletionResponse,
    ChatMessagePart,
    FlakyProvider,
    Gateway,
    HttpProvider,
    ProviderConfig,
    ScriptedProvider,
)

__all__ = [
    "ATTEMPT_TIMEOUT_SECONDS",
    "BACKOFF_BASE_SECONDS",
    "BACKOFF_FACTOR",
    "MAX_ATTEMPTS",
    "PER_PROVIDER_CONCURRENCY",
    "ChatCompletionRequest",
    "ChatCompletionResponse",
    "ChatMessagePart",
    "FlakyProvider",
    "Gateway",
    "HttpProvider",
    "ProviderConfig",
    "ScriptedProvider",
]
