"""Provider gateway: retry policy, scripted rules, structured-output parsing."""

from __future__ import annotations

import json

import pytest

from convene.agents.structured import parse_structured_output
from convene.clock import VirtualClock
from convene.errors import (
    AuthFailure,
    ExhaustedRetries,
    ProviderTimeout,
    RateLimited,
    TransientProviderError,
)
from convene.llm.gateway import (
    ChatCompletionRequest,
    ChatMessagePart,
    FlakyProvider,
    Gateway,
    ProviderConfig,
    ScriptedProvider,
)
from convene.model.types import StructuredField
from conftest import survival_config_dict
from helpers import OWNER, make_runtime

CONFIG = ProviderConfig(providerId="scripted")


def ask(text: str = "hello") -> ChatCompletionRequest:
    return ChatCompletionRequest(messages=[ChatMessagePart(role="user", content=text)])


def gateway_with(provider) -> tuple[Gateway, VirtualClock]:
    clock = VirtualClock(0.0)
    gateway = Gateway(clock)
    gateway.register("scripted", provider)
    if isinstance(provider, FlakyProvider):
        provider.observe_clock(clock)
    return gateway, clock


# -- retry policy ------------------------------------------------------------------


def test_transient_failures_retry_with_doubling_backoff():
    flaky = FlakyProvider(
        ScriptedProvider(default="recovered"),
        failures=[TransientProviderError("blip"), RateLimited("slow down")],
    )
    gateway, _ = gateway_with(flaky)
    response = gateway.complete(CONFIG, ask())
    assert response.content == "recovered"
    assert response.attempts == 3
    assert flaky.attempt_times == [0.0, 1.0, 3.0]  # 1 s, then 2 s between attempts


def test_three_failed_attempts_exhaust_the_retry_budget():
    flaky = FlakyProvider(
        ScriptedProvider(default="never"),
        failures=[ProviderTimeout("t"), ProviderTimeout("t"), ProviderTimeout("t")],
    )
    gateway, _ = gateway_with(flaky)
    with pytest.raises(ExhaustedRetries):
        gateway.complete(CONFIG, ask())
    assert flaky.attempts == 3


def test_auth_failures_never_retry():
    flaky = FlakyProvider(ScriptedProvider(default="never"), failures=[AuthFailure("bad key")])
    gateway, clock = gateway_with(flaky)
    with pytest.raises(AuthFailure):
        gateway.complete(CONFIG, ask())
    assert flaky.attempts == 1
    assert clock.now() == 0.0  # no backoff sleep happened


def test_unregistered_providers_are_an_auth_failure():
    gateway, _ = gateway_with(ScriptedProvider())
    with pytest.raises(AuthFailure):
        gateway.complete(ProviderConfig(providerId="missing"), ask())


def test_empty_requests_are_rejected_before_any_call():
    gateway, _ = gateway_with(ScriptedProvider())
    with pytest.raises(ValueError):
        gateway.complete(CONFIG, ChatCompletionRequest(messages=[]))


# -- scripted provider ---------------------------------------------------------------


def test_the_first_matching_rule_wins():
    provider = ScriptedProvider(
        rules=[
            {"match": "ranking", "response": "I vote mirror."},
            {"match": "rank", "response": "shadowed"},
        ],
        default="fallback",
    )
    gateway, _ = gateway_with(provider)
    assert gateway.complete(CONFIG, ask("the ranking so far")).content == "I vote mirror."
    assert gateway.complete(CONFIG, ask("no keywords here")).content == "fallback"


def test_once_rules_are_consumed_by_their_first_hit():
    provider = ScriptedProvider(
        rules=[{"match": "hello", "response": "greeting", "once": True}],
        default="fallback",
    )
    gateway, _ = gateway_with(provider)
    assert gateway.complete(CONFIG, ask("hello there")).content == "greeting"
    assert gateway.complete(CONFIG, ask("hello again")).content == "fallback"


# -- structured output -----------------------------------------------------------------


SCHEMA = [
    StructuredField("shouldRespond", "bool"),
    StructuredField("response", "text"),
    StructuredField("readyToEndChat", "bool"),
    StructuredField("confidence", "real"),
]


def good(payload: dict) -> dict:
    base = {"shouldRespond": True, "response": "hi", "readyToEndChat": False}
    base.update(payload)
    return base


def test_parser_accepts_json_wrapped_in_prose_and_fences():
    doc = json.dumps(good({"confidence": 0.5}))
    for raw in (doc, f"Sure! Here you go:\n```json\n{doc}\n```\nDone.", f"prefix {{oops {doc}"):
        outcome = parse_structured_output(raw, SCHEMA)
        assert outcome.ok, raw
        assert outcome.record["response"] == "hi"


def test_parser_takes_the_first_object_that_satisfies_the_schema():
    bad = json.dumps({"shouldRespond": "yes"})
    fine = json.dumps(good({}))
    outcome = parse_structured_output(f"{bad} then {fine}", SCHEMA)
    assert outcome.ok
    assert outcome.record["shouldRespond"] is True


def test_parser_reports_the_nearest_miss_on_failure():
    outcome = parse_structured_output('{"shouldRespond": 1}', SCHEMA)
    assert not outcome.ok
    assert outcome.error["offset"] == 0
    assert "shouldRespond" in outcome.error["reason"]

    outcome = parse_structured_output("no braces at all", SCHEMA)
    assert outcome.error == {"offset": -1, "reason": "no JSON object found"}


def test_parser_enforces_types_without_bool_int_confusion():
    assert not parse_structured_output(json.dumps(good({"confidence": True})), SCHEMA).ok
    assert parse_structured_output(json.dumps(good({"confidence": 2})), SCHEMA).ok
    int_schema = SCHEMA[:3] + [StructuredField("count", "int")]
    assert not parse_structured_output(json.dumps(good({"count": 1.5})), int_schema).ok
    assert not parse_structured_output(json.dumps(good({"count": True})), int_schema).ok


def test_missing_mandatory_fields_fail_while_optional_ones_may_be_absent():
    missing_mandatory = {"shouldRespond": True, "response": "hi"}
    outcome = parse_structured_output(json.dumps(missing_mandatory), SCHEMA)
    assert not outcome.ok
    assert "readyToEndChat" in outcome.error["reason"]
    no_confidence = parse_structured_output(json.dumps(good({})), SCHEMA)
    assert no_confidence.ok


# -- key custody through the runtime ------------------------------------------------------


def test_registered_keys_appear_in_events_only_as_refs():
    runtime, _ = make_runtime(survival_config_dict())
    ref = runtime.register_api_key(OWNER, "scripted", "sk-SUPER-SECRET", endpoint_url="https://api.example/v1")
    assert "sk-SUPER-SECRET" not in ref
    dump = json.dumps([e.to_dict() for e in runtime.store.all_events()])
    assert "sk-SUPER-SECRET" not in dump
    assert ref in dump
