"""End-to-end guarantees, each verified against an independent oracle.

Every test here states one externally observable promise of the platform:
desk-scale runs finish fast and completely, elections match a brute-force
count, agent selection follows typing speed, wait gates never leak, cohort
membership stays atomic under concurrency, exports never carry secrets,
replay rebuilds exact state, the output parser survives hostile text, and
attention checks are accounted exactly.
"""

from __future__ import annotations

import io
import itertools
import json
import random
import threading
import time
import zipfile

import pytest

from convene.agents.structured import parse_structured_output
from convene.api.streams import StreamHub
from convene.engine.runtime import select_round_winner
from convene.engine.state import replay
from convene.errors import ConveneError, GateBlocked
from convene.model.parse import canonical_dumps
from convene.model.types import AgentSpec, StructuredField
from convene.sim import SimulationRunner, parse_simulation_plan
from convene.store.events import FileEventStore
from convene.tally import Ballot, compute_election_winner
from helpers import OWNER, cast_cohort, make_runtime, survival_plan_doc
from oracles import oracle_election_winner, oracle_parse_structured

KEY_SENTINEL = "sk-crimson-heron-0927-tail"

MANDATORY_SCHEMA = [
    StructuredField("shouldRespond", "bool"),
    StructuredField("response", "text"),
    StructuredField("readyToEndChat", "bool"),
]
MANDATORY_TYPES = {"shouldRespond": "bool", "response": "text", "readyToEndChat": "bool"}


def info_stage(stage_id: str, title: str = "Read") -> dict:
    return {"id": stage_id, "kind": "Info", "title": title, "markdownBody": f"{title}."}


def desk_invocation(data_dir=None) -> SimulationRunner:
    """One full desk-scale run: 50 cohorts of the scripted survival cast."""
    plan = parse_simulation_plan(survival_plan_doc(cohort_count=50, seed="desk-1", jitter=2.0))
    runner = SimulationRunner(plan, data_dir=data_dir)
    runner.runtime.register_api_key(runner.creator, "scripted", KEY_SENTINEL)
    return runner


def log_text(runner: SimulationRunner) -> str:
    return "".join(e.canonical_line() + "\n" for e in runner.runtime.store.all_events())


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """The shared end-to-end run, persisted to disk, plus an in-memory twin.

    The twin runs first so the main run knows the total event count and can
    capture state snapshots at pre-chosen points: a subscriber fires before
    event k+1 is applied, so at that moment the live state reflects exactly
    the first k events.
    """
    twin = desk_invocation()
    twin_result = twin.run()
    total = twin.runtime.store.head()

    rng = random.Random("replay-points")
    points = sorted(rng.sample(range(300, total - 5), 20))

    data_dir = tmp_path_factory.mktemp("desk") / "exp-survival"
    started = time.perf_counter()
    runner = desk_invocation(data_dir=data_dir)
    captures: dict[int, str] = {}
    wanted = {k + 1 for k in points}

    def capture(event) -> None:
        if event.globalSeq in wanted:
            captures[event.globalSeq - 1] = canonical_dumps(runner.runtime.state.to_dict())

    runner.runtime.subscribe(capture)
    result = runner.run()
    wall = time.perf_counter() - started
    return {
        "runner": runner,
        "result": result,
        "wall": wall,
        "data_dir": data_dir,
        "captures": captures,
        "log_main": log_text(runner),
        "log_twin": log_text(twin),
        "twin_result": twin_result,
    }


# -- desk-scale end-to-end run -----------------------------------------------------


def test_desk_scale_run_completes_every_cohort_in_under_a_minute(desk):
    result = desk["result"]
    assert result.completed and result.reason == "allTerminal"
    assert result.cohortCount == 50
    assert result.cohortsCompleted == 50
    state = desk["runner"].runtime.state
    humans = [p for p in state.participants.values() if not p.isAgent]
    assert len(humans) == 200
    assert all(p.status == "completed" for p in humans)
    rows = desk["runner"].payout_csv().strip().splitlines()
    assert rows[0] == "externalId,completionStatus,bonus,idKind"
    assert len(rows) - 1 == 200
    assert desk["wall"] < 60.0


# -- ranked elections against a brute-force count ----------------------------------


def test_election_winner_matches_the_brute_force_oracle_on_every_profile():
    trio = ["a", "b", "c"]
    orderings = list(itertools.permutations(trio))
    checked = 0
    for profile in itertools.product(orderings, repeat=3):
        named = [(f"v{i}", tuple(ranking)) for i, ranking in enumerate(profile)]
        ballots = [Ballot(voter, ranking) for voter, ranking in named]
        assert compute_election_winner(ballots, trio).winner == oracle_election_winner(named, trio)
        checked += 1
    assert checked == 216

    quartet = ["a", "b", "c", "d"]
    rng = random.Random("election-4x4")
    for _ in range(1000):
        named = []
        for i in range(4):
            depth = rng.choice([2, 3, 4, 4, 4])  # a few truncated ballots
            named.append((f"v{i}", tuple(rng.sample(quartet, k=depth))))
        ballots = [Ballot(voter, ranking) for voter, ranking in named]
        assert compute_election_winner(ballots, quartet).winner == oracle_election_winner(named, quartet)


# -- typing speed drives selection and delivery -------------------------------------


def test_wpm_weighted_selection_frequency_and_typing_delay_follow_the_law():
    fast = AgentSpec(id="fast", role="mediator", wpm=60)
    slow = AgentSpec(id="slow", role="mediator", wpm=30)
    raised = {"shouldRespond": True, "response": "on my way", "readyToEndChat": False}
    fast_wins = 0
    for i in range(10_000):
        winner = select_round_winner(
            "wpmWeighted",
            f"round-{i}",
            [("fast", fast, dict(raised)), ("slow", slow, dict(raised))],
        )
        assert winner is not None
        if winner[0] == "fast":
            fast_wins += 1
    assert abs(fast_wins / 10_000 - 2 / 3) <= 0.02

    thirty_words = json.dumps(
        {"shouldRespond": True, "response": " ".join(["word"] * 30), "readyToEndChat": False}
    )
    doc = {
        "id": "exp-delay",
        "metadata": {"name": "Typing delay"},
        "stages": [
            {
                "id": "profile",
                "kind": "Profile",
                "title": "You",
                "kindParams": {"mode": "assignedPseudonym", "pseudonymSet": "animal"},
            },
            {
                "id": "chat",
                "kind": "GroupChat",
                "title": "Talk",
                "ui": {"waitForAllParticipants": True},
                "kindParams": {"mediatorAgentIds": ["guide"]},
            },
            info_stage("end", "Done"),
        ],
        "agentTemplates": [
            {
                "id": "guide",
                "role": "mediator",
                "profile": {"displayName": "Guide", "avatar": "M"},
                "model": {"providerId": "scripted", "modelName": "default"},
                "wpm": 60,
            }
        ],
        "roles": {OWNER: "creator"},
    }
    runtime, clock = make_runtime(doc, rules=[], gateway=None)
    from convene.llm.gateway import Gateway, ScriptedProvider

    gateway = Gateway(clock)
    gateway.register("scripted", ScriptedProvider([], default=thirty_words))
    runtime._gateway = gateway
    _, publics, _ = cast_cohort(runtime, 2)
    for public_id in publics:
        runtime.submit_answer(public_id)
    scheduled = [e for e in runtime.store.all_events() if e.kind == "agent_message_scheduled"][0]
    assert scheduled.payload["deliverAt"] - scheduled.payload["scheduledAt"] == 30.0
    clock.advance_to(scheduled.payload["deliverAt"])
    runtime.tick()
    delivered = [e for e in runtime.store.all_events() if e.kind == "agent_message_delivered"][0]
    assert delivered.timestamp == scheduled.payload["scheduledAt"] + 30.0


# -- wait gates never leak and boots unblock -----------------------------------------


def gate_config() -> dict:
    return {
        "id": "exp-gate",
        "metadata": {"name": "Gate safety"},
        "stages": [
            info_stage("brief"),
            {
                "id": "chat",
                "kind": "GroupChat",
                "title": "Talk",
                "ui": {"waitForAllParticipants": True},
                "kindParams": {},
            },
            info_stage("end", "Done"),
        ],
        "roles": {OWNER: "creator"},
    }


def assert_gate_matches_oracle(runtime, live: set[str], opened: bool) -> None:
    """Every live participant parked at the gated stage agrees with the oracle."""
    for public_id in live:
        view = runtime.participant_view(public_id)
        if view.get("stage", {}).get("id") != "chat":
            continue
        if opened:
            assert view["gateOpen"]
            assert "chat" in view
        else:
            assert not view["gateOpen"]
            assert "chat" not in view
            with pytest.raises(GateBlocked):
                runtime.send_chat_message(public_id, "early")


def test_randomized_schedules_never_expose_gated_content_and_boots_unblock():
    for trial in range(1000):
        rng = random.Random(f"gate-{trial}")
        runtime, _ = make_runtime(gate_config(), seed=f"gate-{trial}")
        size = rng.randint(2, 5)
        _, publics, _ = cast_cohort(runtime, size)
        live = set(publics)
        arrived: set[str] = set()
        opened = False
        ops: list[tuple[str, str]] = [("arrive", p) for p in publics]
        for public_id in rng.sample(publics, k=rng.randint(0, size - 1)):
            ops.append(("boot", public_id))
        rng.shuffle(ops)
        for op, public_id in ops:
            if op == "arrive":
                if public_id not in live:
                    continue
                runtime.submit_answer(public_id)
                arrived.add(public_id)
            else:
                runtime.boot_participant(OWNER, public_id)
                live.discard(public_id)
            runtime.tick()
            if not opened and live and live <= arrived:
                opened = True
            assert_gate_matches_oracle(runtime, live, opened)

    # The canonical laggard case: everyone waits on one straggler; booting
    # the straggler must open the gate for the survivors within one tick.
    runtime, _ = make_runtime(gate_config(), seed="gate-laggard")
    _, publics, _ = cast_cohort(runtime, 5)
    for public_id in publics[:-1]:
        runtime.submit_answer(public_id)
    for public_id in publics[:-1]:
        assert not runtime.participant_view(public_id)["gateOpen"]
    runtime.boot_participant(OWNER, publics[-1])
    runtime.tick()
    for public_id in publics[:-1]:
        view = runtime.participant_view(public_id)
        assert view["gateOpen"] and "chat" in view


# -- cohort membership stays atomic under concurrency --------------------------------


def membership_config() -> dict:
    return {
        "id": "exp-members",
        "metadata": {"name": "Membership"},
        "stages": [info_stage("hold")],
        "roles": {OWNER: "creator"},
    }


def test_concurrent_transfers_boots_and_joins_keep_membership_atomic():
    accepted_total = 0
    snapshots_total = 0
    for trial in range(1000):
        rng = random.Random(f"atomic-{trial}")
        runtime, _ = make_runtime(membership_config(), seed=f"atomic-{trial}")
        cohorts = [runtime.create_cohort(OWNER) for _ in range(3)]
        publics: list[str] = []
        for cohort_id in cohorts[:2]:
            for slot in runtime.mint_participants(OWNER, cohort_id, count=2):
                runtime.join(slot["privateId"])
                publics.append(slot["publicId"])

        violations: list[tuple[str, list[str]]] = []
        accepted = [0]
        stop = threading.Event()

        def checker() -> None:
            count = 0
            while not stop.is_set() or count == 0:
                for public_id, homes in runtime.membership_snapshot().items():
                    if len(homes) != 1:
                        violations.append((public_id, homes))
                count += 1
            checks.append(count)

        def worker(script: list[tuple]) -> None:
            for op in script:
                try:
                    if op[0] == "transfer":
                        runtime.create_transfer(OWNER, op[1], op[2])
                        runtime.respond_transfer(op[1], op[3])
                        if op[3]:
                            accepted[0] += 1
                    elif op[0] == "boot":
                        runtime.boot_participant(OWNER, op[1])
                    else:
                        slot = runtime.mint_participants(OWNER, op[1], count=1)[0]
                        runtime.join(slot["privateId"])
                except ConveneError:
                    pass  # domain rejections are fine; the invariant is what matters

        scripts = []
        for _ in range(3):
            script: list[tuple] = []
            for _ in range(rng.randint(3, 6)):
                kind = rng.random()
                if kind < 0.6:
                    script.append(
                        ("transfer", rng.choice(publics), rng.choice(cohorts), rng.random() < 0.8)
                    )
                elif kind < 0.8:
                    script.append(("boot", rng.choice(publics)))
                else:
                    script.append(("join", rng.choice(cohorts)))
            scripts.append(script)

        checks: list[int] = []
        threads = [threading.Thread(target=worker, args=(s,)) for s in scripts]
        observer = threading.Thread(target=checker)
        observer.start()
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        stop.set()
        observer.join()

        assert violations == []
        for public_id, homes in runtime.membership_snapshot().items():
            assert len(homes) == 1, f"{public_id} listed in {homes}"
        accepted_total += accepted[0]
        snapshots_total += checks[0]
    assert accepted_total > 100  # the schedule actually moved people around
    assert snapshots_total >= 1000


# -- exports and participant frames never carry secrets ------------------------------


def participant_frame_text(runner: SimulationRunner) -> str:
    state = runner.runtime.state

    def members_of(cohort_id: str) -> list[str]:
        cohort = state.cohorts.get(cohort_id)
        if cohort is None:
            return []
        return [pid for pid in cohort.memberPublicIds if not state.participants[pid].isAgent]

    frames = StreamHub().replay_frames(
        runner.runtime.experiment_id, runner.runtime.store.all_events(), members_of
    )
    visible = [
        payload
        for topic, _seq, payload in frames
        if topic.startswith(("cohortPublic/", "participantPrivate/"))
    ]
    assert len(visible) > 1000  # the run really produced participant traffic
    return "\n".join(canonical_dumps(payload) for payload in visible)


def test_exports_and_participant_frames_contain_no_private_ids_or_key_material(desk):
    runner = desk["runner"]
    secrets = [actor._private_id for actor in runner.actors] + [KEY_SENTINEL]
    assert len(secrets) == 201

    archive = zipfile.ZipFile(io.BytesIO(runner.archive()))
    blobs = {name: archive.read(name).decode("utf-8", errors="replace") for name in archive.namelist()}
    assert "events.jsonl" in blobs and "stats.json" in blobs
    blobs["payouts-endpoint.csv"] = runner.payout_csv()
    blobs["participant-frames"] = participant_frame_text(runner)

    leaks = [
        (name, secret)
        for name, text in blobs.items()
        for secret in secrets
        if secret in text
    ]
    assert leaks == []


# -- replay rebuilds exact state; identical runs produce identical logs ---------------


def test_replay_at_random_points_rebuilds_state_and_reruns_are_byte_identical(desk):
    assert desk["log_main"] == desk["log_twin"]
    assert desk["log_main"]

    events = FileEventStore(desk["data_dir"]).all_events()
    assert [e.globalSeq for e in events] == list(range(1, len(events) + 1))
    assert len(desk["captures"]) == 20
    for k, expected in sorted(desk["captures"].items()):
        assert canonical_dumps(replay(events[:k]).to_dict()) == expected


# -- the structured-output parser survives hostile text -------------------------------


def fuzz_response(rng: random.Random) -> str:
    """One provider reply: valid-wrapped, corrupted, incomplete, or garbage."""
    words = ["ok", "sure", "analysis:", "{", "}", "```json", "```", "USER:", "fin", "42", "done"]

    def prose() -> str:
        return " ".join(rng.choice(words) for _ in range(rng.randint(0, 8)))

    def valid() -> dict:
        doc = {
            "shouldRespond": rng.random() < 0.5,
            "response": " ".join(rng.choice(words) for _ in range(rng.randint(0, 6))),
            "readyToEndChat": rng.random() < 0.5,
        }
        if rng.random() < 0.3:
            doc["confidence"] = round(rng.random(), 3)
        return doc

    roll = rng.random()
    if roll < 0.3:
        return f"{prose()} {json.dumps(valid(), ensure_ascii=False)} {prose()}"
    if roll < 0.5:
        doc = valid()
        field = rng.choice(["shouldRespond", "response", "readyToEndChat"])
        doc[field] = rng.choice(["yes", 1, 2.5, None, [True], {"v": 1}])
        return f"{prose()} {json.dumps(doc)} {prose()}"
    if roll < 0.65:
        doc = valid()
        for field in rng.sample(["shouldRespond", "response", "readyToEndChat"], k=rng.randint(1, 2)):
            del doc[field]
        return f"{prose()} {json.dumps(doc)} {prose()}"
    if roll < 0.75:
        broken = dict(valid())
        broken["note"] = prose()
        return f"{json.dumps(broken)[: rng.randint(1, 20)]} {prose()}"
    if roll < 0.85:
        first = valid()
        first.pop("response")
        return f"{prose()} {json.dumps(first)} then {json.dumps(valid())}"
    if roll < 0.95:
        return json.dumps({"wrapper": valid(), "mood": "fine"})
    return prose() or "silence"


def test_structured_output_fuzzing_never_crashes_and_matches_the_oracle():
    rng = random.Random("structured-fuzz")
    parsed = 0
    failed = 0
    for _ in range(10_000):
        raw = fuzz_response(rng)
        outcome = parse_structured_output(raw, MANDATORY_SCHEMA)
        expected = oracle_parse_structured(raw, MANDATORY_TYPES)
        assert outcome.ok == (expected is not None), raw
        if outcome.ok:
            assert outcome.record == expected, raw
            parsed += 1
        else:
            assert outcome.error is not None and "reason" in outcome.error
            failed += 1
    assert parsed >= 1000 and failed >= 1000
    assert parsed + failed == 10_000


# -- attention checks are accounted exactly -------------------------------------------


def test_attention_stats_count_every_check_sent_and_every_acknowledgement():
    doc = {
        "id": "exp-attention",
        "metadata": {"name": "Attention accounting"},
        "stages": [info_stage("intro"), info_stage("end", "Done")],
        "roles": {OWNER: "creator"},
    }
    runtime, clock = make_runtime(doc, seed="attention-1")
    _, publics, _ = cast_cohort(runtime, 100)
    for public_id in publics:
        runtime.send_attention_check(OWNER, public_id, deadline_seconds=30)
    for public_id in publics[:75]:
        runtime.acknowledge_attention(public_id)
    clock.advance_to(30.0)
    runtime.tick()

    archive = zipfile.ZipFile(io.BytesIO(runtime.export_archive(OWNER)))
    stats = json.loads(archive.read("stats.json"))
    assert stats["attentionChecks"]["sent"] == 100
    assert stats["attentionChecks"]["passed"] == 75
    assert stats["attentionChecks"]["failed"] == 25
