"""Headless simulation: plan validation, the agenda loop, and stop conditions."""

from __future__ import annotations

import json

import pytest

from conftest import survival_config_dict
from convene.errors import ConfigParseError
from convene.sim.plan import (
    load_simulation_plan,
    parse_simulation_plan,
    validate_simulation_plan,
)
from convene.sim.runner import SimulationRunner, run_simulation
from helpers import survival_plan_doc


def parse(doc: dict):
    return parse_simulation_plan(doc)


def errors_of(plan) -> list[str]:
    return [i.path for i in validate_simulation_plan(plan) if i.severity == "error"]


# -- plan parsing ---------------------------------------------------------------


def test_a_full_plan_parses_cleanly():
    plan = parse(survival_plan_doc(cohort_count=3))
    assert plan.cohortCount == 3
    assert [s.externalId for s in plan.participants] == ["alice", "bob", "cara", "dave"]
    assert plan.stopCondition.kind == "allTerminal"
    assert errors_of(plan) == []


def test_parse_reports_the_first_bad_field():
    doc = survival_plan_doc()
    del doc["experimentConfig"]
    with pytest.raises(ConfigParseError) as info:
        parse(doc)
    assert "experimentConfig" in str(info.value)


def test_participants_must_be_a_non_empty_list():
    doc = survival_plan_doc()
    doc["participants"] = []
    with pytest.raises(ConfigParseError) as info:
        parse(doc)
    assert "participants" in str(info.value)


def test_external_ids_must_be_non_empty_strings():
    doc = survival_plan_doc()
    doc["participants"][1]["externalId"] = ""
    with pytest.raises(ConfigParseError) as info:
        parse(doc)
    assert "participants[1].externalId" in str(info.value)


def test_jitter_must_be_non_negative():
    doc = survival_plan_doc()
    doc["participants"][0]["jitterSeconds"] = -1
    with pytest.raises(ConfigParseError):
        parse(doc)


def test_stop_condition_must_name_a_known_rule():
    doc = survival_plan_doc()
    doc["stopCondition"] = {"untilBored": True}
    with pytest.raises(ConfigParseError) as info:
        parse(doc)
    assert "stopCondition" in str(info.value)


def test_max_sim_seconds_must_be_positive():
    doc = survival_plan_doc()
    doc["stopCondition"] = {"maxSimSeconds": 0}
    with pytest.raises(ConfigParseError):
        parse(doc)


def test_plans_can_reference_config_files(tmp_path):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(survival_config_dict()))
    doc = survival_plan_doc()
    doc["experimentConfig"] = "config.json"
    plan_path = tmp_path / "plan.json"
    plan_path.write_text(json.dumps(doc))
    plan = load_simulation_plan(plan_path)
    assert plan.config.id == "exp-survival"


# -- coverage validation ----------------------------------------------------------


def test_every_script_must_cover_content_stages():
    doc = survival_plan_doc()
    del doc["participants"][2]["stages"]["election"]
    plan = parse(doc)
    problems = errors_of(plan)
    assert problems == ["election"]


def test_survey_scripts_need_answer_objects():
    doc = survival_plan_doc()
    doc["participants"][0]["stages"]["leader-task"] = {"answers": {}}
    plan = parse(doc)
    assert "leader-task" in errors_of(plan)


def test_scripts_may_not_reference_unknown_stages():
    doc = survival_plan_doc()
    doc["participants"][0]["stages"]["mystery"] = {"messages": ["?"]}
    plan = parse(doc)
    assert "participants[0].stages.mystery" in errors_of(plan)


def test_duplicate_external_ids_are_rejected():
    doc = survival_plan_doc()
    doc["participants"][1]["externalId"] = "alice"
    plan = parse(doc)
    assert "participants[1].externalId" in errors_of(plan)


def test_rankings_must_name_cast_members():
    doc = survival_plan_doc()
    doc["participants"][0]["stages"]["election"]["ranking"] = ["bob", "zelda"]
    plan = parse(doc)
    assert "participants[0].stages.election" in errors_of(plan)


def test_load_raises_on_the_first_coverage_error(tmp_path):
    doc = survival_plan_doc()
    del doc["participants"][0]["stages"]["leader-task"]
    plan_path = tmp_path / "plan.json"
    plan_path.write_text(json.dumps(doc))
    with pytest.raises(ConfigParseError) as info:
        load_simulation_plan(plan_path)
    assert "leader-task" in str(info.value)


# -- running ------------------------------------------------------------------------


def test_the_survival_plan_completes_every_cohort():
    result, runner = run_simulation(parse(survival_plan_doc(cohort_count=3, jitter=2.0)))
    assert result.completed is True
    assert result.reason == "allTerminal"
    assert result.cohortsCompleted == result.cohortCount == 3
    state = runner.runtime.state
    humans = [p for p in state.participants.values() if not p.isAgent]
    assert len(humans) == 12
    assert all(p.status == "completed" for p in humans)
    assert result.payoutTotalMinor > 0


def test_rosters_replicate_with_indexed_external_ids():
    _, runner = run_simulation(parse(survival_plan_doc(cohort_count=2)))
    externals = sorted(
        p.externalId for p in runner.runtime.state.participants.values() if not p.isAgent
    )
    assert externals == sorted(
        f"{name}.{i}" for name in ("alice", "bob", "cara", "dave") for i in range(2)
    )


def test_scripted_rankings_elect_the_same_leader_everywhere():
    _, runner = run_simulation(parse(survival_plan_doc(cohort_count=3)))
    state = runner.runtime.state
    for cohort in state.cohorts.values():
        result = cohort.elections["election"].result
        assert result is not None
        winner_external = state.participants[result["winner"]].externalId
        # bob is ranked first by two of the three other voters in every cohort.
        assert winner_external.startswith("bob.")


def test_mediator_replies_are_delivered_when_time_passes():
    result, runner = run_simulation(parse(survival_plan_doc(jitter=3.0)))
    delivered = [
        e for e in runner.runtime.store.all_events() if e.kind == "agent_message_delivered"
    ]
    assert result.completed is True
    assert delivered, "the scripted mediator never got a message through"


def test_identical_plans_produce_byte_identical_event_logs():
    _, first = run_simulation(parse(survival_plan_doc(cohort_count=2, jitter=2.0)))
    _, second = run_simulation(parse(survival_plan_doc(cohort_count=2, jitter=2.0)))
    log_a = "".join(e.canonical_line() for e in first.runtime.store.all_events())
    log_b = "".join(e.canonical_line() for e in second.runtime.store.all_events())
    assert log_a == log_b


def test_different_seeds_diverge():
    _, first = run_simulation(parse(survival_plan_doc(seed="sim-1", jitter=2.0)))
    _, second = run_simulation(parse(survival_plan_doc(seed="sim-2", jitter=2.0)))
    log_a = "".join(e.canonical_line() for e in first.runtime.store.all_events())
    log_b = "".join(e.canonical_line() for e in second.runtime.store.all_events())
    assert log_a != log_b


def test_max_sim_seconds_cuts_the_run_short():
    result, _ = run_simulation(
        parse(survival_plan_doc(jitter=3.0, stop={"maxSimSeconds": 4.0}))
    )
    assert result.completed is False
    assert result.reason == "maxSimSeconds"
    assert result.simSeconds == 4.0


def test_a_wedged_run_is_reported_as_stalled_not_spun():
    runner = SimulationRunner(parse(survival_plan_doc()))
    cohort_id = next(iter(runner.runtime.state.cohorts))
    # An unscripted straggler keeps the waitForAll chat gate shut forever.
    runner.runtime.mint_participants(runner.creator, cohort_id, count=1, external_ids=["ghost"])
    result = runner.run()
    assert result.completed is False
    assert result.reason == "stalled"


def test_actors_can_decline_attention_checks():
    runner = SimulationRunner(
        parse(survival_plan_doc(jitter=2.0, acknowledge_attention=False))
    )
    cohort_id = next(iter(runner.runtime.state.cohorts))
    target = runner.runtime.state.cohorts[cohort_id].memberPublicIds[0]
    runner.runtime.send_attention_check(runner.creator, target, deadline_seconds=5)
    result = runner.run()
    stats = runner.runtime.state.attentionStats
    assert stats["sent"] == 1
    assert stats["passed"] == 0
    assert stats["failed"] == 1
    # Failure notifies the facilitator; it never boots, so the run still ends.
    resolved = [
        e
        for e in runner.runtime.store.all_events()
        if e.kind == "attention_check_resolved" and e.payload["publicId"] == target
    ]
    assert [e.payload["outcome"] for e in resolved] == ["failed"]
    assert result.reason == "allTerminal"


def test_the_event_log_is_persisted_when_a_data_dir_is_given(tmp_path):
    result, runner = run_simulation(parse(survival_plan_doc()), data_dir=tmp_path)
    assert result.completed is True
    assert (tmp_path / "events.jsonl").exists()
    lines = (tmp_path / "events.jsonl").read_text().splitlines()
    assert len(lines) == result.eventCount
