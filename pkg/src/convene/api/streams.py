"""Topic fan-out: engine events projected onto websocket streams.

Three topic families with different trust levels:

- ``cohortPublic/{cohortId}``: what everyone in the room may see. Frames are
  built by whitelist, never by scrubbing: each event kind maps to an explicit
  frame shape, so a new payload field stays private until someone decides
  otherwise. Undelivered agent drafts surface only as a typing flag.
- ``participantPrivate/{publicId}``: offers, attention checks, facilitator
  messages, rejected answers. Delivered solely to that participant's session.
- ``experimenterDebug/{experimentId}``: the raw event feed (agent call logs,
  alerts, running tallies) for role-holding experimenters.

Frames are ``{topic, sequence, payload}`` with ``sequence`` = the event's
globalSeq, so clients deduplicate after an at-least-once redelivery.
"""

from __future__ import annotations

import threading
from typing import Callable

from convene.store.events import EventRecord

TOPIC_COHORT = "cohortPublic"
TOPIC_PARTICIPANT = "participantPrivate"
TOPIC_DEBUG = "experimenterDebug"


def cohort_topic(cohort_id: str) -> str:
    return f"{TOPIC_COHORT}/{cohort_id}"


def participant_topic(public_id: str) -> str:
    return f"{TOPIC_PARTICIPANT}/{public_id}"


def debug_topic(experiment_id: str) -> str:
    return f"{TOPIC_DEBUG}/{experiment_id}"


class FrameBuilder:
    """Deterministic event -> frames projection for one experiment.

    Keeps the minimum state needed across events: scheduled agent drafts,
    held back until their delivery event so the room sees typing first and
    text only at deliverAt.
    """

    def __init__(self, experiment_id: str, members_of: Callable[[str], list[str]] | None = None):
        self._experiment_id = experiment_id
        self._members_of = members_of or (lambda cohort_id: [])
        self._drafts: dict[str, dict] = {}

    def frames(self, event: EventRecord) -> list[tuple[str, dict]]:
        out = [(debug_topic(self._experiment_id), self._debug_frame(event))]
        builder = getattr(self, f"_on_{event.kind}", None)
        if builder is not None:
            out.extend(builder(event))
        return out

    def _debug_frame(self, event: EventRecord) -> dict:
        return {"type": "event", **event.to_dict()}

    # -- cohortPublic projections ------------------------------------------

    def _on_chat_posted(self, event: EventRecord) -> list[tuple[str, dict]]:
        p = event.payload
        frame = {
            "type": "chatMessage",
            "stageId": p["stageId"],
            "chatKey": p.get("chatKey", p["stageId"]),
            "messageId": p["messageId"],
            "senderPublicId": p["senderPublicId"],
            "displayName": p["displayName"],
            "avatar": p.get("avatar", ""),
            "text": p["text"],
            "deliveredAt": p["deliveredAt"],
            "senderKind": p.get("senderKind", "participant"),
        }
        return [(cohort_topic(event.streamId), frame)]

    def _on_agent_message_scheduled(self, event: EventRecord) -> list[tuple[str, dict]]:
        p = event.payload
        self._drafts[p["messageId"]] = dict(p)
        frame = {
            "type": "typing",
            "stageId": p["stageId"],
            "chatKey": p.get("chatKey", p["stageId"]),
            "senderPublicId": p["senderPublicId"],
            "displayName": p["displayName"],
            "avatar": p.get("avatar", ""),
            "typing": True,
        }
        return [(cohort_topic(event.streamId), frame)]

    def _on_agent_message_delivered(self, event: EventRecord) -> list[tuple[str, dict]]:
        draft = self._drafts.pop(event.payload["messageId"], None)
        if draft is None:
            return []
        frame = {
            "type": "chatMessage",
            "stageId": draft["stageId"],
            "chatKey": draft.get("chatKey", draft["stageId"]),
            "messageId": draft["messageId"],
            "senderPublicId": draft["senderPublicId"],
            "displayName": draft["displayName"],
            "avatar": draft.get("avatar", ""),
            "text": draft["text"],
            "deliveredAt": event.timestamp,
            "senderKind": "agent",
        }
        return [(cohort_topic(event.streamId), frame)]

    def _on_agent_delivery_cancelled(self, event: EventRecord) -> list[tuple[str, dict]]:
        draft = self._drafts.pop(event.payload.get("messageId", ""), None)
        if draft is None:
            return []
        frame = {
            "type": "typing",
            "stageId": draft["stageId"],
            "chatKey": draft.get("chatKey", draft["stageId"]),
            "senderPublicId": draft["senderPublicId"],
            "displayName": draft["displayName"],
            "avatar": draft.get("avatar", ""),
            "typing": False,
        }
        return [(cohort_topic(event.streamId), frame)]

    def _on_gate_opened(self, event: EventRecord) -> list[tuple[str, dict]]:
        p = event.payload
        frame = {"type": "gateOpened", "stageId": p["stageId"], "openedAt": p["openedAt"]}
        return [(cohort_topic(event.streamId), frame)]

    def _on_participant_created(self, event: EventRecord) -> list[tuple[str, dict]]:
        p = event.payload
        profile = p.get("profile") or {}
        frame = {
            "type": "peerJoined",
            "publicId": p["publicId"],
            "displayName": profile.get("displayName", ""),
            "avatar": profile.get("avatar", ""),
        }
        return [(cohort_topic(event.streamId), frame)]

    def _on_participant_joined(self, event: EventRecord) -> list[tuple[str, dict]]:
        p = event.payload
        frame = {"type": "peerPresence", "publicId": p["publicId"], "connected": True}
        return [(cohort_topic(event.streamId), frame)]

    def _on_profile_updated(self, event: EventRecord) -> list[tuple[str, dict]]:
        p = event.payload
        frame = {
            "type": "peerProfile",
            "publicId": p["publicId"],
            "displayName": p.get("displayName", ""),
            "avatar": p.get("avatar", ""),
            "pronouns": p.get("pronouns", ""),
        }
        return [(cohort_topic(event.streamId), frame)]

    def _on_participant_advanced(self, event: EventRecord) -> list[tuple[str, dict]]:
        p = event.payload
        # Answers stay out of the room; peers only see movement.
        frame = {
            "type": "peerProgress",
            "publicId": p["publicId"],
            "stageIndex": p["toIndex"],
            "completed": p.get("completed", False),
        }
        return [(cohort_topic(event.streamId), frame)]

    def _on_ready_toggled(self, event: EventRecord) -> list[tuple[str, dict]]:
        p = event.payload
        frame = {
            "type": "readiness",
            "stageId": p["stageId"],
            "chatKey": p.get("chatKey", p["stageId"]),
            "publicId": p["publicId"],
            "ready": p["ready"],
        }
        return [(cohort_topic(event.streamId), frame)]

    def _on_participant_booted(self, event: EventRecord) -> list[tuple[str, dict]]:
        p = event.payload
        public = {"type": "peerStatus", "publicId": p["publicId"], "status": "booted"}
        private = {"type": "removed", "reason": p.get("reason", "facilitator")}
        return [
            (cohort_topic(event.streamId), public),
            (participant_topic(p["publicId"]), private),
        ]

    def _on_transfer_executed(self, event: EventRecord) -> list[tuple[str, dict]]:
        p = event.payload
        joined = {"type": "peerJoined", "publicId": p["publicId"], "displayName": "", "avatar": ""}
        left = {"type": "peerLeft", "publicId": p["publicId"]}
        out = [(cohort_topic(p["toCohortId"]), joined)]
        if p.get("fromCohortId"):
            out.append((cohort_topic(p["fromCohortId"]), left))
        return out

    def _on_cohort_locked(self, event: EventRecord) -> list[tuple[str, dict]]:
        frame = {"type": "cohortLocked", "locked": event.payload.get("locked", True)}
        return [(cohort_topic(event.streamId), frame)]

    def _on_reveal_built(self, event: EventRecord) -> list[tuple[str, dict]]:
        frame = {"type": "revealReady", "stageId": event.payload["stageId"]}
        return [(cohort_topic(event.streamId), frame)]

    # -- participantPrivate projections -------------------------------------

    def _on_transfer_offer_created(self, event: EventRecord) -> list[tuple[str, dict]]:
        p = event.payload
        frame = {
            "type": "transferOffer",
            "fromCohortId": p["fromCohortId"],
            "toCohortId": p["toCohortId"],
            "expiresAt": p["expiresAt"],
        }
        return [(participant_topic(p["publicId"]), frame)]

    def _on_transfer_offer_expired(self, event: EventRecord) -> list[tuple[str, dict]]:
        frame = {"type": "transferOfferExpired"}
        return [(participant_topic(event.payload["publicId"]), frame)]

    def _on_attention_check_sent(self, event: EventRecord) -> list[tuple[str, dict]]:
        p = event.payload
        frame = {
            "type": "attentionCheck",
            "checkId": p["checkId"],
            "sentAt": p["sentAt"],
            "deadlineSeconds": p["deadlineSeconds"],
        }
        return [(participant_topic(p["publicId"]), frame)]

    def _on_attention_check_resolved(self, event: EventRecord) -> list[tuple[str, dict]]:
        p = event.payload
        frame = {"type": "attentionResolved", "checkId": p["checkId"], "outcome": p["outcome"]}
        return [(participant_topic(p["publicId"]), frame)]

    def _on_answer_rejected(self, event: EventRecord) -> list[tuple[str, dict]]:
        p = event.payload
        frame = {
            "type": "answerRejected",
            "stageId": p["stageId"],
            "perQuestion": p.get("perQuestion", {}),
            "attempt": p.get("attempt", 1),
        }
        return [(participant_topic(p["publicId"]), frame)]

    def _on_facilitator_messaged(self, event: EventRecord) -> list[tuple[str, dict]]:
        p = event.payload
        frame = {"type": "facilitatorMessage", "text": p["text"], "sentAt": p["sentAt"]}
        if p.get("publicId"):
            return [(participant_topic(p["publicId"]), frame)]
        cohort_id = p.get("cohortId") or event.streamId
        return [(participant_topic(pid), dict(frame)) for pid in self._members_of(cohort_id)]

    def _on_payout_computed(self, event: EventRecord) -> list[tuple[str, dict]]:
        p = event.payload
        frame = {"type": "payoutReady", "stageId": p["stageId"]}
        return [(participant_topic(pid), dict(frame)) for pid in sorted(p.get("rows", {}))]

    def _on_role_assigned(self, event: EventRecord) -> list[tuple[str, dict]]:
        p = event.payload
        assignments = p.get("assignments", {})
        return [
            (participant_topic(pid), {"type": "roleAssigned", "stageId": p["stageId"], "roleId": role_id})
            for pid, role_id in sorted(assignments.items())
        ]


class Subscription:
    """One websocket session's view of the firehose.

    `enqueue` is thread-safe: the engine appends events from request worker
    threads while the socket drains frames on the event loop.
    """

    def __init__(self, deliver: Callable[[dict], None]):
        self._deliver = deliver
        self.topics: set[str] = set()
        # Participant sessions track identity instead of a cohort topic so a
        # transfer retargets their room stream automatically.
        self.participant_id: str | None = None
        self.cohort_of: Callable[[str], str | None] | None = None

    def wants(self, topic: str) -> bool:
        if topic in self.topics:
            return True
        if self.participant_id is not None and topic.startswith(f"{TOPIC_COHORT}/"):
            if self.cohort_of is None:
                return False
            return topic == cohort_topic(self.cohort_of(self.participant_id) or "")
        return False

    def push(self, topic: str, sequence: int, payload: dict) -> None:
        self._deliver({"topic": topic, "sequence": sequence, "payload": payload})


class StreamHub:
    """Routes each appended event's frames to the live subscriptions."""

    def __init__(self):
        self._lock = threading.Lock()
        self._builders: dict[str, FrameBuilder] = {}
        self._subscriptions: set[Subscription] = set()

    def register_experiment(self, experiment_id: str, members_of: Callable[[str], list[str]]) -> FrameBuilder:
        builder = FrameBuilder(experiment_id, members_of)
        with self._lock:
            self._builders[experiment_id] = builder
        return builder

    def attach(self, subscription: Subscription) -> None:
        with self._lock:
            self._subscriptions.add(subscription)

    def detach(self, subscription: Subscription) -> None:
        with self._lock:
            self._subscriptions.discard(subscription)

    def publish(self, experiment_id: str, event: EventRecord) -> None:
        with self._lock:
            builder = self._builders.get(experiment_id)
            subscriptions = list(self._subscriptions)
        if builder is None:
            return
        for topic, payload in builder.frames(event):
            for subscription in subscriptions:
                if subscription.wants(topic):
                    subscription.push(topic, event.globalSeq, payload)

    def replay_frames(
        self,
        experiment_id: str,
        events: list[EventRecord],
        members_of: Callable[[str], list[str]],
        after_sequence: int = 0,
    ) -> list[tuple[str, int, dict]]:
        """Rebuild the frame history for reconnect resync.

        Projection is deterministic, so walking the log through a fresh
        builder reproduces exactly what a never-disconnected client saw.
        """
        builder = FrameBuilder(experiment_id, members_of)
        out: list[tuple[str, int, dict]] = []
        for event in events:
            frames = builder.frames(event)
            if event.globalSeq <= after_sequence:
                continue
            out.extend((topic, event.globalSeq, payload) for topic, payload in frames)
        return out
