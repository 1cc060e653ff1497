"""Agent participation: rounds, typing delays, pauses, stage walking, stalls."""

from __future__ import annotations

import json

from convene.engine.runtime import MAX_AGENT_STAGE_ATTEMPTS, select_round_winner
from convene.llm.gateway import Gateway, ScriptedProvider
from convene.model.types import AgentSpec
from helpers import OWNER, cast_cohort, make_gateway, make_runtime

SAY = json.dumps({"shouldRespond": True, "response": "one two three", "readyToEndChat": False})
QUIET = json.dumps({"shouldRespond": False, "response": "", "readyToEndChat": False})


def reply(words: int, ready: bool = False, **extra) -> str:
    doc = {"shouldRespond": True, "response": " ".join(["word"] * words), "readyToEndChat": ready}
    doc.update(extra)
    return json.dumps(doc)


def chat_config(
    mediators: list[dict],
    default_reply: str = QUIET,
    rules: list[dict] | None = None,
    chat_params: dict | None = None,
    wait: bool = True,
):
    chat_stage: dict = {
        "id": "chat",
        "kind": "GroupChat",
        "title": "Talk",
        "kindParams": {
            "mediatorAgentIds": [m["id"] for m in mediators],
            **(chat_params or {}),
        },
    }
    if wait:
        chat_stage["ui"] = {"waitForAllParticipants": True}
    doc = {
        "id": "exp-agents",
        "metadata": {"name": "Agent flows"},
        "stages": [
            {
                "id": "profile",
                "kind": "Profile",
                "title": "You",
                "kindParams": {"mode": "assignedPseudonym", "pseudonymSet": "animal"},
            },
            chat_stage,
            {"id": "end", "kind": "Info", "title": "Done", "markdownBody": "Done."},
        ],
        "agentTemplates": mediators,
        "roles": {OWNER: "creator"},
    }
    runtime, clock = make_runtime(doc, rules=rules, gateway=None)
    # Swap in a provider we can interrogate.
    provider = ScriptedProvider(rules or [], default=default_reply)
    gateway = Gateway(clock)
    gateway.register("scripted", provider)
    runtime._gateway = gateway
    return runtime, clock, provider


def mediator(template_id: str = "guide", wpm: float = 60, **extra) -> dict:
    return {
        "id": template_id,
        "role": "mediator",
        "profile": {"displayName": template_id.title(), "avatar": "M"},
        "model": {"providerId": "scripted", "modelName": "default"},
        "wpm": wpm,
        **extra,
    }


def open_chat(runtime, publics) -> None:
    for public_id in publics:
        runtime.submit_answer(public_id)


def events_of(runtime, kind: str):
    return [e for e in runtime.store.all_events() if e.kind == kind]


def chat_messages(runtime, public_id) -> list[dict]:
    view = runtime.participant_view(public_id)
    return (view.get("chat") or {}).get("messages", [])


# -- rounds ----------------------------------------------------------------------


def test_gate_open_starts_a_round_that_queries_each_mediator_once():
    runtime, _, provider = chat_config([mediator("guide"), mediator("coach")])
    _, publics, _ = cast_cohort(runtime, 2)
    assert provider.calls == 0
    open_chat(runtime, publics)
    assert len(events_of(runtime, "agent_round_started")) == 1
    assert provider.calls == 2


def test_declining_agents_schedule_no_message():
    runtime, _, _ = chat_config([mediator()], default_reply=QUIET)
    _, publics, _ = cast_cohort(runtime, 2)
    open_chat(runtime, publics)
    selection = events_of(runtime, "round_selection")[-1]
    assert selection.payload["raises"] == []
    assert events_of(runtime, "agent_message_scheduled") == []


def test_below_threshold_confidence_is_filtered_by_the_response_gate():
    gated = mediator(
        "guide",
        responseGate={"fieldName": "confidence", "threshold": 0.7},
        structuredOutputSchema=[{"fieldName": "confidence", "fieldType": "real"}],
    )
    runtime, _, _ = chat_config([gated], default_reply=reply(3, confidence=0.4))
    _, publics, _ = cast_cohort(runtime, 2)
    open_chat(runtime, publics)
    assert events_of(runtime, "agent_message_scheduled") == []

    runtime2, _, _ = chat_config([gated], default_reply=reply(3, confidence=0.9))
    _, publics2, _ = cast_cohort(runtime2, 2)
    open_chat(runtime2, publics2)
    assert len(events_of(runtime2, "agent_message_scheduled")) == 1


# -- typing delay -------------------------------------------------------------------


def test_replies_arrive_after_the_words_per_minute_delay():
    runtime, clock, _ = chat_config([mediator(wpm=60)], default_reply=reply(30))
    _, publics, _ = cast_cohort(runtime, 2)
    open_chat(runtime, publics)  # round at t=0 schedules a 30-word reply
    scheduled = events_of(runtime, "agent_message_scheduled")[-1].payload
    assert scheduled["wordCount"] == 30
    assert scheduled["deliverAt"] - scheduled["scheduledAt"] == 30.0
    view_chat = runtime.participant_view(publics[0])["chat"]
    assert view_chat["typing"] is True
    assert view_chat["messages"] == []
    clock.advance_to(29.9)
    runtime.tick()
    assert chat_messages(runtime, publics[0]) == []
    clock.advance_to(30.0)
    runtime.tick()
    delivered = chat_messages(runtime, publics[0])
    assert len(delivered) == 1
    assert delivered[0]["senderKind"] == "agent"
    assert runtime.participant_view(publics[0])["chat"]["typing"] is False


def test_disabling_the_throttle_delivers_immediately():
    runtime, _, _ = chat_config(
        [mediator(wpm=1)], default_reply=reply(40), chat_params={"disableWpmThrottle": True}
    )
    _, publics, _ = cast_cohort(runtime, 2)
    open_chat(runtime, publics)
    assert len(chat_messages(runtime, publics[0])) == 1


def test_a_post_during_delivery_queues_one_follow_up_round():
    runtime, clock, _ = chat_config([mediator(wpm=60)], default_reply=reply(60))
    _, publics, _ = cast_cohort(runtime, 2)
    open_chat(runtime, publics)  # 60-word reply: delivery at t=60
    runtime.send_chat_message(publics[0], "are you there?")  # mid-delivery
    assert len(events_of(runtime, "agent_round_started")) == 1
    clock.advance_to(60.0)
    runtime.tick()
    # The queued round starts as soon as the pending message lands.
    assert len(events_of(runtime, "agent_round_started")) == 2


def test_an_arrival_during_delivery_logs_an_explicit_deferral():
    runtime, clock, _ = chat_config([mediator(wpm=60)], default_reply=reply(60), wait=False)
    _, publics, _ = cast_cohort(runtime, 2)
    open_chat(runtime, [publics[0]])  # ungated: alice alone starts round 0
    assert len(events_of(runtime, "agent_round_started")) == 1
    open_chat(runtime, [publics[1]])  # bob arrives while the reply is typing
    assert len(events_of(runtime, "agent_round_deferred")) == 1
    assert len(events_of(runtime, "agent_round_started")) == 1
    clock.advance_to(60.0)
    runtime.tick()
    assert len(events_of(runtime, "agent_round_started")) == 2


def test_pausing_cancels_the_in_flight_delivery():
    runtime, clock, provider = chat_config([mediator("guide", wpm=60)], default_reply=reply(60))
    cohort_id, publics, _ = cast_cohort(runtime, 2)
    open_chat(runtime, publics)
    agent_id = f"guide@{cohort_id}"
    runtime.pause_agent(OWNER, cohort_id, agent_id, paused=True)
    cancelled = events_of(runtime, "agent_delivery_cancelled")
    assert len(cancelled) == 1
    assert cancelled[0].payload["reason"] == "cancelled_by_pause"
    assert runtime.participant_view(publics[0])["chat"]["typing"] is False
    clock.advance_to(120.0)
    runtime.tick()
    assert chat_messages(runtime, publics[0]) == []
    calls_before = provider.calls
    runtime.send_chat_message(publics[0], "hello?")
    assert provider.calls == calls_before  # paused agents are not queried


def test_unpausing_triggers_a_fresh_round():
    runtime, _, provider = chat_config([mediator("guide")], default_reply=QUIET)
    cohort_id, publics, _ = cast_cohort(runtime, 2)
    agent_id = f"guide@{cohort_id}"
    runtime.pause_agent(OWNER, cohort_id, agent_id, paused=True)
    open_chat(runtime, publics)
    assert provider.calls == 0
    runtime.pause_agent(OWNER, cohort_id, agent_id, paused=False)
    assert provider.calls == 1


# -- live template edits ---------------------------------------------------------------


def test_wpm_edits_change_future_delivery_delays():
    runtime, clock, _ = chat_config([mediator("guide", wpm=60)], default_reply=reply(30))
    _, publics, _ = cast_cohort(runtime, 2)
    open_chat(runtime, publics)
    first = events_of(runtime, "agent_message_scheduled")[-1].payload
    assert first["deliverAt"] - first["scheduledAt"] == 30.0
    clock.advance_to(first["deliverAt"])
    runtime.tick()
    runtime.edit_agent_template(OWNER, "guide", wpm=600)
    runtime.send_chat_message(publics[0], "faster now please")
    second = events_of(runtime, "agent_message_scheduled")[-1].payload
    assert second["deliverAt"] - second["scheduledAt"] == 3.0


def test_persona_edits_reach_the_next_prompt():
    runtime, _, _ = chat_config([mediator("guide", personaPrompt="Stay neutral.")], default_reply=reply(1))
    _, publics, _ = cast_cohort(runtime, 2)
    runtime.edit_agent_template(OWNER, "guide", persona_prompt="Quote only pirates.")
    open_chat(runtime, publics)
    logged = events_of(runtime, "agent_call_logged")[-1].payload
    assert "Quote only pirates." in logged["prompt"]
    assert "Stay neutral." not in logged["prompt"]


# -- agent participants ------------------------------------------------------------------


def agent_walk_config() -> dict:
    return {
        "id": "exp-agent-walk",
        "metadata": {"name": "Agent walk"},
        "stages": [
            {
                "id": "profile",
                "kind": "Profile",
                "title": "You",
                "kindParams": {"mode": "assignedPseudonym", "pseudonymSet": "animal"},
            },
            {"id": "brief", "kind": "Info", "title": "Brief", "markdownBody": "Go."},
            {
                "id": "quiz",
                "kind": "Survey",
                "title": "Quiz",
                "kindParams": {
                    "questions": [
                        {
                            "id": "q1",
                            "kind": "multipleChoice",
                            "prompt": "Which tool ranks first?",
                            "options": [{"id": "mirror", "text": "Mirror"}, {"id": "map", "text": "Map"}],
                        }
                    ]
                },
            },
        ],
        "agentTemplates": [
            {
                "id": "player",
                "role": "participant",
                "profile": {"displayName": "Player", "avatar": "P"},
                "personaPrompt": "You answer quizzes.",
                "model": {"providerId": "scripted", "modelName": "default"},
                "wpm": 60,
            }
        ],
        "roles": {OWNER: "creator"},
    }


def test_agent_participants_walk_every_stage_they_can_answer():
    rules = [
        {
            "match": "Which tool ranks first?",
            "response": json.dumps(
                {"shouldRespond": False, "response": "", "readyToEndChat": False, "answers": {"q1": "mirror"}}
            ),
        }
    ]
    runtime, _ = make_runtime(agent_walk_config(), rules=rules)
    cohort_id = runtime.create_cohort(OWNER)
    agent_id = runtime.add_agent_participant(OWNER, cohort_id, "player")
    record = runtime.state.participants[agent_id]
    assert record.status == "completed"
    quiz_answer = record.stageAnswers["quiz"].answers
    assert quiz_answer == {"q1": "mirror"}


def test_a_stalled_agent_raises_one_alert_after_repeated_failures():
    runtime, _ = make_runtime(agent_walk_config(), rules=[])  # default "" never parses
    cohort_id = runtime.create_cohort(OWNER)
    agent_id = runtime.add_agent_participant(OWNER, cohort_id, "player")
    for _ in range(MAX_AGENT_STAGE_ATTEMPTS + 2):
        runtime.tick()
    record = runtime.state.participants[agent_id]
    assert record.currentStageIndex == 2  # parked at the quiz
    alerts = events_of(runtime, "alert_raised")
    assert len(alerts) == 1
    alert_id = alerts[0].payload["alertId"]
    assert alert_id == f"stall-{agent_id}-quiz"
    rejected = events_of(runtime, "answer_rejected")
    assert len(rejected) == MAX_AGENT_STAGE_ATTEMPTS
    runtime.resolve_alert(OWNER, alert_id, response="will nudge manually")
    resolved = runtime.state.alerts[alert_id]
    assert resolved["resolvedAt"] is not None
    assert resolved["facilitatorResponse"] == "will nudge manually"


# -- round winner selection ----------------------------------------------------------------


def spec(agent_id: str, wpm: float) -> AgentSpec:
    return AgentSpec(id=agent_id, role="mediator", wpm=wpm)


def test_fastest_wins_selection_prefers_the_quicker_typist():
    short = {"response": "three words here"}
    winner = select_round_winner(
        "fastestWins",
        "seed:any",
        [("slow", spec("slow", wpm=30), short), ("fast", spec("fast", wpm=90), short)],
    )
    assert winner[0] == "fast"


def test_fastest_wins_ties_break_on_the_lower_agent_id():
    same = {"response": "three words here"}
    winner = select_round_winner(
        "fastestWins",
        "seed:any",
        [("bravo", spec("bravo", wpm=60), same), ("alpha", spec("alpha", wpm=60), same)],
    )
    assert winner[0] == "alpha"


def test_weighted_selection_is_deterministic_per_seed_key():
    candidates = [
        ("a", spec("a", wpm=60), {"response": "hello"}),
        ("b", spec("b", wpm=30), {"response": "hello"}),
    ]
    first = select_round_winner("wpmWeighted", "seed:round:1", candidates)
    again = select_round_winner("wpmWeighted", "seed:round:1", candidates)
    assert first == again
    assert select_round_winner("wpmWeighted", "seed:round:1", []) is None
