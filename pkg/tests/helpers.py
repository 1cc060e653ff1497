"""Test scaffolding: virtual-clock runtimes, casting, and stage walking."""

from __future__ import annotations

import json

from convene.clock import VirtualClock
from convene.engine.runtime import ExperimentRuntime
from convene.errors import GateBlocked
from convene.llm.gateway import Gateway, ScriptedProvider

OWNER = "owner@example.org"

SIM_CAST = ("alice", "bob", "cara", "dave")
SIM_RANKINGS = {
    "alice": ["bob", "cara", "dave"],
    "bob": ["cara", "alice", "dave"],
    "cara": ["bob", "dave", "alice"],
    "dave": ["bob", "alice", "cara"],
}
SIM_QUIZ_ANSWERS = {"q1": "mirror", "q2": "map", "q3": "mirror"}


def survival_plan_doc(
    cohort_count: int = 1,
    seed: str = "sim-1",
    jitter: float = 0.0,
    stop: dict | None = None,
    acknowledge_attention: bool = True,
) -> dict:
    """A full scripted cast for the seven-stage survival config."""
    from conftest import survival_config_dict

    say = json.dumps(
        {
            "shouldRespond": True,
            "response": "Keep focused on the ranking task",
            "readyToEndChat": False,
        }
    )
    scripts = [
        {
            "externalId": name,
            "jitterSeconds": jitter,
            "acknowledgeAttention": acknowledge_attention,
            "stages": {
                "chat": {"messages": [f"{name} checking in", f"{name} votes mirror first"]},
                "election": {"ranking": SIM_RANKINGS[name]},
                "leader-task": {"answers": dict(SIM_QUIZ_ANSWERS)},
            },
        }
        for name in SIM_CAST
    ]
    doc = {
        "experimentConfig": survival_config_dict(),
        "participants": scripts,
        "seed": seed,
        "cohortCount": cohort_count,
        "providerScript": {"default": say},
    }
    if stop is not None:
        doc["stopCondition"] = stop
    return doc


def make_gateway(clock: VirtualClock, rules: list[dict] | None = None, default: str = "On it.") -> Gateway:
    """A gateway whose only provider answers from a fixed rule table."""
    gateway = Gateway(clock)
    gateway.register("scripted", ScriptedProvider(rules or [], default=default))
    return gateway


def make_runtime(
    config_doc: dict,
    seed: str = "seed-1",
    data_dir=None,
    rules: list[dict] | None = None,
    gateway: Gateway | None = None,
) -> tuple[ExperimentRuntime, VirtualClock]:
    clock = VirtualClock(0.0)
    if gateway is None:
        gateway = make_gateway(clock, rules)
    runtime = ExperimentRuntime.create(
        config_doc, OWNER, clock=clock, data_dir=data_dir, seed=seed, gateway=gateway
    )
    return runtime, clock


def cast_cohort(runtime: ExperimentRuntime, count: int = 4) -> tuple[str, list[str], list[str]]:
    """Create a cohort and join `count` participants; returns ids three ways."""
    cohort_id = runtime.create_cohort(OWNER)
    minted = runtime.mint_participants(OWNER, cohort_id, count=count)
    for slot in minted:
        runtime.join(slot["privateId"])
    publics = [slot["publicId"] for slot in minted]
    privates = [slot["privateId"] for slot in minted]
    return cohort_id, publics, privates


def default_question_answer(question: dict):
    if question["kind"] == "multipleChoice":
        if question.get("correctAnswer"):
            return question["correctAnswer"]
        return question["options"][0]["id"]
    if question["kind"] == "checkbox":
        return [question["options"][0]["id"]]
    if question["kind"] == "scale":
        return question["scaleBounds"]["min"]
    return "free text answer"


def default_answer(runtime: ExperimentRuntime, public_id: str) -> dict | None:
    """The minimal valid answer for the participant's current stage."""
    view = runtime.participant_view(public_id)
    stage = view.get("stage")
    if stage is None:
        return None
    kind = stage["kind"]
    params = stage.get("kindParams") or {}
    if kind == "TermsOfService":
        return {"acknowledged": True}
    if kind == "Profile" and params.get("mode") == "selfChosen":
        return {"displayName": f"Name-{public_id[:6]}"}
    if kind in ("Survey", "Comprehension"):
        return {q["id"]: default_question_answer(q) for q in params["questions"]}
    if kind == "SurveyPerParticipant":
        subjects = [p["publicId"] for p in view["peers"] if p["statusFlag"] != "booted"]
        if not params.get("excludeSelf"):
            subjects.append(public_id)
        return {
            f"{q['id']}:{s}": default_question_answer(q)
            for q in params["questions"]
            for s in subjects
        }
    if kind == "RankingElection":
        return {"ranking": view["election"]["candidates"]}
    return None


def step_participant(runtime: ExperimentRuntime, public_id: str) -> bool:
    """One default action for the current stage; True if it advanced."""
    view = runtime.participant_view(public_id)
    if view["completed"] or view["status"] != "active":
        return False
    stage = view.get("stage")
    if stage is None or not view.get("gateOpen", False):
        return False
    kind = stage["kind"]
    if kind in ("GroupChat", "PrivateChat"):
        chat = view.get("chat") or {}
        if not chat.get("readyToEnd", {}).get(public_id):
            runtime.send_chat_message(public_id, f"hello from {public_id}")
            runtime.toggle_ready_to_end(public_id, True)
        try:
            return bool(runtime.submit_answer(public_id).get("advanced"))
        except GateBlocked:
            return False
    try:
        return bool(runtime.submit_answer(public_id, default_answer(runtime, public_id)).get("advanced"))
    except GateBlocked:
        return False


def walk_cohort(
    runtime: ExperimentRuntime,
    publics: list[str],
    until_stage: str | None = None,
    max_rounds: int = 200,
) -> None:
    """Step everyone with default actions until done or parked at a stage id."""
    for _ in range(max_rounds):
        runtime.tick()
        progressed = False
        waiting = 0
        for public_id in publics:
            view = runtime.participant_view(public_id)
            if view["completed"] or view["status"] != "active":
                continue
            if until_stage is not None and view.get("stage", {}).get("id") == until_stage:
                waiting += 1
                continue
            if step_participant(runtime, public_id):
                progressed = True
        live = [p for p in publics if runtime.participant_view(p)["status"] == "active"]
        if until_stage is not None and waiting == len(live) and live:
            return
        if all(runtime.participant_view(p)["completed"] or runtime.participant_view(p)["status"] != "active" for p in publics):
            return
        if not progressed:
            runtime.tick()
    raise AssertionError(f"cohort did not reach {until_stage or 'completion'} in {max_rounds} rounds")
