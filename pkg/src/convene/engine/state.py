"""Experiment state and the pure event reducer.

`apply_event` is the single place state changes. It never consults a clock or
random source: every timestamp, draw, and assignment arrives inside the event
payload, so folding the same log always rebuilds the same state (replay
determinism). Command handlers in runtime.py decide, reducers record.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from convene.engine.records import (
    AgentBinding,
    AnswerRecord,
    ChatMessage,
    ChatState,
    Cohort,
    ElectionState,
    ParticipantRecord,
    Profile,
    TransferOffer,
)
from convene.model.parse import experiment_config_to_dict, parse_experiment_config
from convene.model.types import (
    ChatStageParams,
    ExperimentConfig,
    RankingElectionParams,
    StageKind,
)
from convene.tally import Ballot, aggregate_item_ranking, compute_election_winner

if TYPE_CHECKING:
    from convene.store.events import EventRecord


@dataclass
class ExperimentState:
    config: ExperimentConfig
    participants: dict[str, ParticipantRecord] = field(default_factory=dict)
    cohorts: dict[str, Cohort] = field(default_factory=dict)
    offers: dict[str, TransferOffer] = field(default_factory=dict)  # publicId -> latest offer
    agents: dict[str, dict[str, AgentBinding]] = field(default_factory=dict)  # cohortId -> agentId -> binding
    attention: dict[str, dict] = field(default_factory=dict)  # publicId -> current check
    attentionStats: dict[str, int] = field(default_factory=lambda: {"sent": 0, "passed": 0, "failed": 0})
    alerts: dict[str, dict] = field(default_factory=dict)
    failedAttempts: dict[str, int] = field(default_factory=dict)  # "publicId/stageId" -> count
    stageListFrozen: bool = False
    arrivalCounter: int = 0
    appliedGlobalSeq: int = 0

    # -- derived views ------------------------------------------------------
    def cohort_members(self, cohort_id: str) -> list[ParticipantRecord]:
        cohort = self.cohorts[cohort_id]
        return [self.participants[pid] for pid in cohort.memberPublicIds]

    def active_members(self, cohort_id: str) -> list[ParticipantRecord]:
        return [p for p in self.cohort_members(cohort_id) if not p.terminal]

    def election_candidates(self, cohort: Cohort, stage_id: str) -> list[str]:
        """Peer elections: every non-booted member; item mode: the item ids."""
        stage = self.config.stage_by_id(stage_id)
        params = stage.kindParams if stage else None
        if isinstance(params, RankingElectionParams) and params.mode == "items":
            return [item["id"] for item in params.items]
        return sorted(
            pid
            for pid in cohort.memberPublicIds
            if self.participants[pid].status != "booted"
        )

    def gate_open(self, cohort: Cohort, stage_index: int) -> bool:
        """waitForAll gate: open once every non-terminal member has arrived."""
        stage = self.config.stages[stage_index]
        if not stage.ui.waitForAllParticipants:
            return True
        if stage.id in cohort.gateOpenedAt:
            return True
        members = self.active_members(cohort.id)
        if not members:
            return False
        return all(m.currentStageIndex >= stage_index for m in members)

    def chat_key(self, stage_id: str, public_id: str | None = None) -> str:
        """Group chats share one transcript per stage; 1:1 chats key the
        transcript by participant."""
        stage = self.config.stage_by_id(stage_id)
        if stage is not None and stage.kind == StageKind.PRIVATE_CHAT and public_id:
            return f"{stage_id}/{public_id}"
        return stage_id

    def chat_quorum_met(self, cohort: Cohort, stage_id: str, public_id: str | None = None) -> bool:
        """End-chat consensus: quorum of humans ready and every attached
        agent's latest output signalling readyToEndChat."""
        stage = self.config.stage_by_id(stage_id)
        params = stage.kindParams if stage else None
        if not isinstance(params, ChatStageParams) or not params.requireEndChatConsensus:
            return True
        chat = cohort.chat.get(self.chat_key(stage_id, public_id))
        if chat is None:
            return False
        stage_index = self.config.stage_index(stage_id)
        if stage.kind == StageKind.PRIVATE_CHAT:
            humans = [self.participants[public_id]] if public_id else []
        else:
            humans = [
                p
                for p in self.active_members(cohort.id)
                if not p.isAgent and p.currentStageIndex == stage_index
            ]
        ready_humans = sum(1 for p in humans if chat.readyToEnd.get(p.publicId))
        needed = len(humans) if params.endChatQuorum == "all" else min(params.endChatQuorum, len(humans))
        if ready_humans < needed:
            return False
        agent_ids = [
            b.agentId
            for b in self.agents.get(cohort.id, {}).values()
            if b.templateId in params.mediatorAgentIds
        ]
        return all(chat.readyToEnd.get(aid, False) for aid in agent_ids)

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "config": experiment_config_to_dict(self.config),
            "participants": {k: v.to_dict() for k, v in sorted(self.participants.items())},
            "cohorts": {k: v.to_dict() for k, v in sorted(self.cohorts.items())},
            "offers": {k: v.to_dict() for k, v in sorted(self.offers.items())},
            "agents": {
                cid: {aid: b.to_dict() for aid, b in sorted(bindings.items())}
                for cid, bindings in sorted(self.agents.items())
            },
            "attention": {k: dict(v) for k, v in sorted(self.attention.items())},
            "attentionStats": dict(self.attentionStats),
            "alerts": {k: dict(v) for k, v in sorted(self.alerts.items())},
            "failedAttempts": dict(self.failedAttempts),
            "stageListFrozen": self.stageListFrozen,
            "arrivalCounter": self.arrivalCounter,
            "appliedGlobalSeq": self.appliedGlobalSeq,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentState":
        state = cls(config=parse_experiment_config(doc["config"]))
        state.participants = {k: ParticipantRecord.from_dict(v) for k, v in doc["participants"].items()}
        state.cohorts = {k: Cohort.from_dict(v) for k, v in doc["cohorts"].items()}
        state.offers = {k: TransferOffer.from_dict(v) for k, v in doc["offers"].items()}
        state.agents = {
            cid: {aid: AgentBinding.from_dict(b) for aid, b in bindings.items()}
            for cid, bindings in doc["agents"].items()
        }
        state.attention = {k: dict(v) for k, v in doc["attention"].items()}
        state.attentionStats = dict(doc["attentionStats"])
        state.alerts = {k: dict(v) for k, v in doc["alerts"].items()}
        state.failedAttempts = dict(doc.get("failedAttempts", {}))
        state.stageListFrozen = doc["stageListFrozen"]
        state.arrivalCounter = doc["arrivalCounter"]
        state.appliedGlobalSeq = doc.get("appliedGlobalSeq", 0)
        return state


def initial_state() -> ExperimentState:
    """Empty shell; the experiment_created event supplies the config."""
    from convene.model.types import ExperimentMetadata

    return ExperimentState(config=ExperimentConfig(id="", metadata=ExperimentMetadata(name="")))


# ---------------------------------------------------------------------------
# Reducer


def apply_event(state: ExperimentState, event: "EventRecord") -> ExperimentState:
    handler = _HANDLERS.get(event.kind)
    if handler is not None:
        handler(state, event)
    state.appliedGlobalSeq = event.globalSeq
    return state


def replay(events, snapshot: dict | None = None) -> ExperimentState:
    state = ExperimentState.from_dict(snapshot) if snapshot is not None else initial_state()
    for event in events:
        if event.globalSeq <= state.appliedGlobalSeq:
            continue
        apply_event(state, event)
    return state


def _experiment_created(state: ExperimentState, event) -> None:
    state.config = parse_experiment_config(event.payload["configDoc"])


def _config_replaced(state: ExperimentState, event) -> None:
    # Guarded by the stage-list freeze at command time.
    state.config = parse_experiment_config(event.payload["configDoc"])


def _metadata_updated(state, event) -> None:
    patch = event.payload["patch"]
    meta = state.config.metadata
    for key in (
        "name",
        "description",
        "publicVisibility",
        "prolificRedirectUrl",
        "prolificCompletionCode",
        "template",
    ):
        if key in patch:
            setattr(meta, key, patch[key])


def _agent_spec_updated(state, event) -> None:
    spec = state.config.agent_by_id(event.payload["templateId"])
    if spec is None:
        return
    payload = event.payload
    if "personaPrompt" in payload:
        spec.personaPrompt = payload["personaPrompt"]
    if "wpm" in payload:
        spec.wpm = payload["wpm"]


def _cohort_created(state, event) -> None:
    payload = event.payload
    cohort = Cohort(
        id=payload["cohortId"],
        experimentId=state.config.id,
        createdAt=payload["createdAt"],
        isLobby=payload.get("isLobby", False),
    )
    bindings: dict[str, AgentBinding] = {}
    for stage in state.config.stages:
        if stage.kind in (StageKind.GROUP_CHAT, StageKind.PRIVATE_CHAT):
            cohort.chat[stage.id] = ChatState()
            params = stage.kindParams
            if isinstance(params, ChatStageParams):
                for template_id in params.mediatorAgentIds:
                    agent_id = f"{template_id}@{cohort.id}"
                    bindings[agent_id] = AgentBinding(
                        agentId=agent_id, templateId=template_id, cohortId=cohort.id
                    )
        elif stage.kind == StageKind.RANKING_ELECTION:
            cohort.elections[stage.id] = ElectionState()
    state.cohorts[cohort.id] = cohort
    state.agents[cohort.id] = bindings


def _cohort_locked(state, event) -> None:
    state.cohorts[event.streamId].locked = event.payload["locked"]


def _participant_created(state, event) -> None:
    payload = event.payload
    record = ParticipantRecord(
        publicId=payload["publicId"],
        profile=Profile.from_dict(payload.get("profile", {})),
        externalId=payload.get("externalId"),
        cohortId=event.streamId,
        isAgent=payload.get("isAgent", False),
        agentTemplateId=payload.get("agentTemplateId"),
        arrivalSeq=payload["arrivalSeq"],
    )
    record.stageArrivedAt = event.timestamp
    state.participants[record.publicId] = record
    state.cohorts[event.streamId].memberPublicIds.append(record.publicId)
    state.stageListFrozen = True
    state.arrivalCounter = max(state.arrivalCounter, record.arrivalSeq)
    if record.isAgent and record.agentTemplateId:
        # Agent participants get a binding so pause/persona controls reach them.
        state.agents.setdefault(event.streamId, {})[record.publicId] = AgentBinding(
            agentId=record.publicId,
            templateId=record.agentTemplateId,
            cohortId=event.streamId,
        )
    _arm_stage_timer(state, record, event.timestamp)


def _participant_joined(state, event) -> None:
    record = state.participants[event.payload["publicId"]]
    if record.joinedAt is None:
        record.joinedAt = event.payload["joinedAt"]


def _profile_updated(state, event) -> None:
    payload = event.payload
    profile = state.participants[payload["publicId"]].profile
    if "displayName" in payload:
        profile.displayName = payload["displayName"]
    if "avatar" in payload:
        profile.avatar = payload["avatar"]
    if "pronouns" in payload:
        profile.pronouns = payload["pronouns"]


def _participant_advanced(state, event) -> None:
    payload = event.payload
    record = state.participants[payload["publicId"]]
    if payload.get("answer") is not None or payload.get("timedOut"):
        record.stageAnswers[payload["stageId"]] = AnswerRecord(
            stageId=payload["stageId"],
            answers=payload.get("answer") or {},
            timedOut=payload.get("timedOut", False),
            attempts=payload.get("attempt", 1),
            passed=payload.get("passed"),
            submittedAt=event.timestamp,
        )
    record.currentStageIndex = payload["toIndex"]
    record.stageArrivedAt = event.timestamp
    if payload.get("completed"):
        record.status = "completed"
    _arm_stage_timer(state, record, event.timestamp)


def _arm_stage_timer(state: ExperimentState, record: ParticipantRecord, now: float) -> None:
    """Ungated timer stages anchor per participant at arrival; gated ones
    anchor at gate-open (handled by _gate_opened)."""
    if record.currentStageIndex >= len(state.config.stages):
        return
    stage = state.config.stages[record.currentStageIndex]
    if stage.ui.autoAdvanceTimerSeconds is None or stage.ui.waitForAllParticipants:
        return
    cohort = state.cohorts[record.cohortId]
    cohort.timerStartedAt.setdefault(f"{stage.id}:{record.publicId}", now)


def _answer_rejected(state, event) -> None:
    payload = event.payload
    key = f"{payload['publicId']}/{payload['stageId']}"
    state.failedAttempts[key] = state.failedAttempts.get(key, 0) + 1


def _chat_state(state, event) -> ChatState:
    """Payloads carry chatKey (transcript key); group chats fall back to the
    stage id. Private transcripts materialize on first touch."""
    payload = event.payload
    key = payload.get("chatKey", payload["stageId"])
    return state.cohorts[event.streamId].chat.setdefault(key, ChatState())


def _ready_toggled(state, event) -> None:
    payload = event.payload
    chat = _chat_state(state, event)
    chat.readyToEnd[payload["publicId"]] = payload["ready"]


def _chat_posted(state, event) -> None:
    payload = event.payload
    chat = _chat_state(state, event)
    chat.messages.append(
        ChatMessage(
            messageId=payload["messageId"],
            senderPublicId=payload["senderPublicId"],
            displayName=payload["displayName"],
            avatar=payload.get("avatar", ""),
            text=payload["text"],
            sentAt=payload["sentAt"],
            deliveredAt=payload["deliveredAt"],
            senderKind=payload.get("senderKind", "participant"),
        )
    )
    if chat.pendingDelivery is not None:
        chat.roundPending = True


def _agent_round_started(state, event) -> None:
    payload = event.payload
    chat = _chat_state(state, event)
    chat.roundPending = False
    chat.nextRound = max(chat.nextRound, payload["roundId"] + 1)


def _agent_round_deferred(state, event) -> None:
    """A round trigger arrived while a delivery was in flight; remember it."""
    chat = _chat_state(state, event)
    if chat.pendingDelivery is not None:
        chat.roundPending = True


def _agent_message_scheduled(state, event) -> None:
    payload = event.payload
    chat = _chat_state(state, event)
    chat.pendingDelivery = {
        "stageId": payload["stageId"],
        "chatKey": payload.get("chatKey", payload["stageId"]),
        "roundId": payload["roundId"],
        "agentId": payload["agentId"],
        "templateId": payload["templateId"],
        "messageId": payload["messageId"],
        "senderPublicId": payload["senderPublicId"],
        "displayName": payload["displayName"],
        "avatar": payload.get("avatar", ""),
        "text": payload["text"],
        "wordCount": payload["wordCount"],
        "scheduledAt": payload["scheduledAt"],
        "deliverAt": payload["deliverAt"],
    }


def _agent_message_delivered(state, event) -> None:
    payload = event.payload
    chat = _chat_state(state, event)
    pending = chat.pendingDelivery
    if pending is None or pending["messageId"] != payload["messageId"]:
        return
    chat.pendingDelivery = None
    if pending["text"].strip():
        chat.messages.append(
            ChatMessage(
                messageId=pending["messageId"],
                senderPublicId=pending["senderPublicId"],
                displayName=pending["displayName"],
                avatar=pending["avatar"],
                text=pending["text"],
                sentAt=pending["scheduledAt"],
                deliveredAt=pending["deliverAt"],
                senderKind="agent",
            )
        )


def _agent_delivery_cancelled(state, event) -> None:
    payload = event.payload
    chat = _chat_state(state, event)
    if chat.pendingDelivery is not None and chat.pendingDelivery["messageId"] == payload["messageId"]:
        chat.pendingDelivery = None


def _recompute_election(state: ExperimentState, cohort: Cohort, stage_id: str) -> None:
    """Tally over ballots from non-booted voters and non-booted candidates."""
    election = cohort.elections[stage_id]
    stage = state.config.stage_by_id(stage_id)
    params = stage.kindParams if stage else None
    candidates = state.election_candidates(cohort, stage_id)
    ballots = [
        Ballot(voterPublicId=v, ranking=tuple(r))
        for v, r in sorted(election.ballots.items())
        if state.participants.get(v) is not None and state.participants[v].status != "booted"
    ]
    if not ballots:
        election.result = None
        return
    result: dict = {}
    if isinstance(params, RankingElectionParams) and params.mode == "items":
        result["itemRanking"] = aggregate_item_ranking(ballots, candidates)
        if params.electionEnabled:
            result.update(compute_election_winner(ballots, candidates).to_dict())
    else:
        result = compute_election_winner(ballots, candidates).to_dict()
    election.result = result


def _ballot_cast(state, event) -> None:
    payload = event.payload
    cohort = state.cohorts[event.streamId]
    election = cohort.elections[payload["stageId"]]
    election.ballots[payload["publicId"]] = list(payload["ranking"])
    _recompute_election(state, cohort, payload["stageId"])


def _gate_opened(state, event) -> None:
    payload = event.payload
    cohort = state.cohorts[event.streamId]
    cohort.gateOpenedAt.setdefault(payload["stageId"], payload["openedAt"])
    stage = state.config.stage_by_id(payload["stageId"])
    if stage is not None and stage.ui.autoAdvanceTimerSeconds is not None:
        cohort.timerStartedAt.setdefault(payload["stageId"], payload["openedAt"])


def _reveal_built(state, event) -> None:
    payload = event.payload
    cohort = state.cohorts[event.streamId]
    cohort.reveals.setdefault(payload["stageId"], payload["snapshot"])


def _role_assigned(state, event) -> None:
    payload = event.payload
    cohort = state.cohorts[event.streamId]
    cohort.roleAssignments[payload["stageId"]] = dict(payload["assignments"])
    for public_id, role_id in payload["assignments"].items():
        if public_id in state.participants:
            state.participants[public_id].roleId = role_id


def _payout_computed(state, event) -> None:
    payload = event.payload
    state.cohorts[event.streamId].payouts.setdefault(payload["stageId"], payload["rows"])


def _transfer_offer_created(state, event) -> None:
    payload = event.payload
    offer = TransferOffer(
        participantPublicId=payload["publicId"],
        fromCohortId=payload["fromCohortId"],
        toCohortId=payload["toCohortId"],
        expiresAt=payload["expiresAt"],
    )
    state.offers[offer.participantPublicId] = offer
    state.participants[offer.participantPublicId].status = "transferPending"


def _transfer_declined(state, event) -> None:
    public_id = event.payload["publicId"]
    offer = state.offers.get(public_id)
    if offer is not None:
        offer.state = "declined"
    record = state.participants[public_id]
    if record.status == "transferPending":
        record.status = "active"


def _transfer_offer_expired(state, event) -> None:
    public_id = event.payload["publicId"]
    offer = state.offers.get(public_id)
    if offer is not None:
        offer.state = "expired"
    record = state.participants[public_id]
    if record.status == "transferPending":
        record.status = "active"


def _transfer_executed(state, event) -> None:
    """The single event that moves membership; both cohorts change here, so
    no log prefix ever shows the participant in zero or two member lists."""
    payload = event.payload
    public_id = payload["publicId"]
    source = state.cohorts[payload["fromCohortId"]]
    destination = state.cohorts[payload["toCohortId"]]
    if public_id in source.memberPublicIds:
        source.memberPublicIds.remove(public_id)
    if public_id not in destination.memberPublicIds:
        destination.memberPublicIds.append(public_id)
    record = state.participants[public_id]
    record.cohortId = destination.id
    record.status = "active"
    offer = state.offers.get(public_id)
    if offer is not None and offer.state == "pending":
        offer.state = "accepted"
    advance_to = payload.get("advanceToIndex")
    if advance_to is not None and advance_to > record.currentStageIndex:
        stage = state.config.stages[record.currentStageIndex]
        record.stageAnswers.setdefault(
            stage.id, AnswerRecord(stageId=stage.id, submittedAt=event.timestamp)
        )
        record.currentStageIndex = advance_to
        record.stageArrivedAt = event.timestamp
        if advance_to >= len(state.config.stages):
            record.status = "completed"
        else:
            _arm_stage_timer(state, record, event.timestamp)


def _participant_booted(state, event) -> None:
    record = state.participants[event.payload["publicId"]]
    record.status = "booted"
    offer = state.offers.get(record.publicId)
    if offer is not None and offer.state == "pending":
        offer.state = "expired"
    check = state.attention.get(record.publicId)
    if check is not None and check.get("state") == "pending":
        check["state"] = "failed"
    # A boot changes the candidate and voter sets of any unrevealed tally.
    cohort = state.cohorts.get(record.cohortId)
    if cohort is not None:
        for stage_id, election in cohort.elections.items():
            if election.ballots:
                _recompute_election(state, cohort, stage_id)


def _attention_check_sent(state, event) -> None:
    payload = event.payload
    state.attention[payload["publicId"]] = {
        "id": payload["checkId"],
        "state": "pending",
        "sentAt": payload["sentAt"],
        "deadlineSeconds": payload["deadlineSeconds"],
    }
    state.attentionStats["sent"] += 1


def _attention_check_resolved(state, event) -> None:
    payload = event.payload
    check = state.attention.get(payload["publicId"])
    if check is None or check.get("id") != payload["checkId"]:
        return
    check["state"] = payload["outcome"]
    check["resolvedAt"] = payload["resolvedAt"]
    if payload["outcome"] in ("passed", "failed"):
        state.attentionStats[payload["outcome"]] += 1


def _alert_raised(state, event) -> None:
    payload = event.payload
    state.alerts[payload["alertId"]] = {
        "id": payload["alertId"],
        "participantPublicId": payload["publicId"],
        "message": payload["message"],
        "raisedAt": payload["raisedAt"],
        "resolvedAt": None,
        "facilitatorResponse": None,
    }


def _alert_resolved(state, event) -> None:
    payload = event.payload
    alert = state.alerts.get(payload["alertId"])
    if alert is not None:
        alert["resolvedAt"] = payload["resolvedAt"]
        alert["facilitatorResponse"] = payload.get("facilitatorResponse")


def _agent_paused(state, event) -> None:
    payload = event.payload
    binding = state.agents.get(event.streamId, {}).get(payload["agentId"])
    if binding is not None:
        binding.paused = payload["paused"]


_HANDLERS = {
    "experiment_created": _experiment_created,
    "config_replaced": _config_replaced,
    "metadata_updated": _metadata_updated,
    "agent_spec_updated": _agent_spec_updated,
    "cohort_created": _cohort_created,
    "cohort_locked": _cohort_locked,
    "participant_created": _participant_created,
    "participant_joined": _participant_joined,
    "profile_updated": _profile_updated,
    "participant_advanced": _participant_advanced,
    "answer_rejected": _answer_rejected,
    "ready_toggled": _ready_toggled,
    "chat_posted": _chat_posted,
    "agent_round_started": _agent_round_started,
    "agent_round_deferred": _agent_round_deferred,
    "agent_message_scheduled": _agent_message_scheduled,
    "agent_message_delivered": _agent_message_delivered,
    "agent_delivery_cancelled": _agent_delivery_cancelled,
    "ballot_cast": _ballot_cast,
    "gate_opened": _gate_opened,
    "reveal_built": _reveal_built,
    "role_assigned": _role_assigned,
    "payout_computed": _payout_computed,
    "transfer_offer_created": _transfer_offer_created,
    "transfer_declined": _transfer_declined,
    "transfer_offer_expired": _transfer_offer_expired,
    "transfer_executed": _transfer_executed,
    "participant_booted": _participant_booted,
    "attention_check_sent": _attention_check_sent,
    "attention_check_resolved": _attention_check_resolved,
    "alert_raised": _alert_raised,
    "alert_resolved": _alert_resolved,
    "agent_paused": _agent_paused,
    # facilitator_messaged and agent_call_logged are log-only: they fan out to
    # stream topics and exports but change no state.
}
