"""Presence flags: connection windows, idleness, and lag against the cohort."""

from __future__ import annotations

from convene.model.types import RuntimeSettings
from convene.presence import PresenceStore, derive_status_flag
from helpers import OWNER, cast_cohort, make_runtime


def store() -> PresenceStore:
    return PresenceStore(RuntimeSettings())  # 15 s beats, 2 missed, 60 s idle


def test_a_heartbeat_keeps_the_member_connected_for_the_window():
    presence = store()
    presence.record_heartbeat("p1", 0.0)
    assert presence.connected("p1", 30.0) is True  # 15 s x 2 missed
    assert presence.connected("p1", 30.1) is False


def test_unseen_members_are_disconnected_and_idle():
    presence = store()
    assert presence.connected("ghost", 0.0) is False
    assert presence.idle("ghost", 0.0) is True
    assert presence.derive("ghost", 0, [0], 0.0).statusFlag == "inactive"


def test_heartbeats_alone_do_not_refresh_activity():
    presence = store()
    presence.record_activity("p1", 0.0)
    for t in range(10, 71, 10):
        presence.record_heartbeat("p1", float(t))
    state = presence.derive("p1", 2, [2, 2], 70.0)
    assert state.connection == "connected"
    assert state.activity == "idle"  # last real action was 70 s ago
    assert state.statusFlag == "inactive"


def test_actions_count_as_both_activity_and_heartbeat():
    presence = store()
    presence.record_activity("p1", 100.0)
    state = presence.derive("p1", 2, [2, 2], 130.0)
    assert state == state.__class__(
        participantPublicId="p1",
        lastHeartbeatAt=100.0,
        connection="connected",
        activity="active",
        statusFlag="onTrack",
    )


def test_lagging_means_more_than_one_stage_behind_the_median():
    assert derive_status_flag(True, False, 0, [3, 3, 3, 0]) == "lagging"
    assert derive_status_flag(True, False, 2, [3, 3, 3, 2]) == "onTrack"  # exactly median - 1
    assert derive_status_flag(True, False, 1, [3, 3, 3, 1]) == "lagging"
    assert derive_status_flag(True, False, 5, []) == "onTrack"


def test_inactivity_dominates_lag():
    assert derive_status_flag(False, False, 0, [5, 5, 5]) == "inactive"
    assert derive_status_flag(True, True, 0, [5, 5, 5]) == "inactive"


def test_peer_views_surface_the_derived_flag():
    doc = {
        "id": "exp-presence",
        "metadata": {"name": "Presence"},
        "stages": [
            {"id": "a", "kind": "Info", "title": "A", "markdownBody": "One."},
            {"id": "b", "kind": "Info", "title": "B", "markdownBody": "Two."},
            {"id": "c", "kind": "Info", "title": "C", "markdownBody": "Three."},
        ],
        "roles": {OWNER: "creator"},
    }
    runtime, clock = make_runtime(doc)
    _, publics, _ = cast_cohort(runtime, 4)
    lazy, *diligent = publics
    for public_id in diligent:
        runtime.submit_answer(public_id)
        runtime.submit_answer(public_id)
    clock.advance_to(10.0)
    for public_id in diligent:
        runtime.heartbeat(public_id)
    runtime.heartbeat(lazy)
    flags = {p["publicId"]: p["statusFlag"] for p in runtime.participant_view(diligent[0])["peers"]}
    assert flags[lazy] == "lagging"
    assert all(flags[p] == "onTrack" for p in diligent[1:])


def test_silent_members_read_inactive_to_their_peers():
    doc = {
        "id": "exp-presence",
        "metadata": {"name": "Presence"},
        "stages": [{"id": "a", "kind": "Info", "title": "A", "markdownBody": "One."}],
        "roles": {OWNER: "creator"},
    }
    runtime, clock = make_runtime(doc)
    _, publics, _ = cast_cohort(runtime, 2)
    alice, bob = publics
    clock.advance_to(120.0)
    runtime.heartbeat(alice)
    flags = {p["publicId"]: p["statusFlag"] for p in runtime.participant_view(alice)["peers"]}
    assert flags[bob] == "inactive"
