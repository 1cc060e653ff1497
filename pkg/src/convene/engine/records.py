"""Runtime records: participants, cohorts, group-stage payloads.

Everything here serializes to plain JSON dicts so state snapshots and event
payloads stay storage-agnostic. Private ids are deliberately absent from
`ParticipantRecord.to_dict`: the private half of the id pair lives in the
identity registry, never in event-sourced state (see store.identity).
"""

from __future__ import annotations

from dataclasses import dataclass, field

PARTICIPANT_STATUSES = ("active", "booted", "completed", "transferPending")
TERMINAL_STATUSES = ("booted", "completed")


@dataclass
class Profile:
    displayName: str = ""
    avatar: str = ""
    pronouns: str = ""

    def to_dict(self) -> dict:
        return {"displayName": self.displayName, "avatar": self.avatar, "pronouns": self.pronouns}

    @classmethod
    def from_dict(cls, d: dict) -> "Profile":
        return cls(
            displayName=d.get("displayName", ""),
            avatar=d.get("avatar", ""),
            pronouns=d.get("pronouns", ""),
        )


@dataclass
class AnswerRecord:
    stageId: str
    answers: dict = field(default_factory=dict)  # questionId -> value
    timedOut: bool = False
    attempts: int = 1
    passed: bool | None = None  # comprehension grading outcome
    submittedAt: float = 0.0

    def to_dict(self) -> dict:
        return {
            "stageId": self.stageId,
            "answers": dict(self.answers),
            "timedOut": self.timedOut,
            "attempts": self.attempts,
            "passed": self.passed,
            "submittedAt": self.submittedAt,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnswerRecord":
        return cls(
            stageId=d["stageId"],
            answers=dict(d.get("answers", {})),
            timedOut=d.get("timedOut", False),
            attempts=d.get("attempts", 1),
            passed=d.get("passed"),
            submittedAt=d.get("submittedAt", 0.0),
        )


@dataclass
class ParticipantRecord:
    publicId: str
    privateId: str = ""  # live handle only; registry-backed, excluded from to_dict
    profile: Profile = field(default_factory=Profile)
    externalId: str | None = None
    currentStageIndex: int = 0
    stageAnswers: dict[str, AnswerRecord] = field(default_factory=dict)
    status: str = "active"
    cohortId: str = ""
    isAgent: bool = False
    agentTemplateId: str | None = None
    roleId: str | None = None  # assigned by RoleAssignment stages
    arrivalSeq: int = 0  # arrival order within the experiment, for matching
    stageArrivedAt: float = 0.0  # when the current stage was entered
    joinedAt: float | None = None  # first resolve of the private link

    @property
    def terminal(self) -> bool:
        return self.status in TERMINAL_STATUSES

    def to_dict(self) -> dict:
        return {
            "publicId": self.publicId,
            "profile": self.profile.to_dict(),
            "externalId": self.externalId,
            "currentStageIndex": self.currentStageIndex,
            "stageAnswers": {k: v.to_dict() for k, v in self.stageAnswers.items()},
            "status": self.status,
            "cohortId": self.cohortId,
            "isAgent": self.isAgent,
            "agentTemplateId": self.agentTemplateId,
            "roleId": self.roleId,
            "arrivalSeq": self.arrivalSeq,
            "stageArrivedAt": self.stageArrivedAt,
            "joinedAt": self.joinedAt,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParticipantRecord":
        return cls(
            publicId=d["publicId"],
            profile=Profile.from_dict(d.get("profile", {})),
            externalId=d.get("externalId"),
            currentStageIndex=d.get("currentStageIndex", 0),
            stageAnswers={k: AnswerRecord.from_dict(v) for k, v in d.get("stageAnswers", {}).items()},
            status=d.get("status", "active"),
            cohortId=d.get("cohortId", ""),
            isAgent=d.get("isAgent", False),
            agentTemplateId=d.get("agentTemplateId"),
            roleId=d.get("roleId"),
            arrivalSeq=d.get("arrivalSeq", 0),
            stageArrivedAt=d.get("stageArrivedAt", 0.0),
            joinedAt=d.get("joinedAt"),
        )


@dataclass
class ChatMessage:
    messageId: str
    senderPublicId: str
    displayName: str
    avatar: str
    text: str
    sentAt: float
    deliveredAt: float
    senderKind: str = "participant"  # participant | agent

    def to_dict(self) -> dict:
        return {
            "messageId": self.messageId,
            "senderPublicId": self.senderPublicId,
            "displayName": self.displayName,
            "avatar": self.avatar,
            "text": self.text,
            "sentAt": self.sentAt,
            "deliveredAt": self.deliveredAt,
            "senderKind": self.senderKind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChatMessage":
        return cls(
            messageId=d["messageId"],
            senderPublicId=d["senderPublicId"],
            displayName=d.get("displayName", ""),
            avatar=d.get("avatar", ""),
            text=d["text"],
            sentAt=d.get("sentAt", 0.0),
            deliveredAt=d.get("deliveredAt", 0.0),
            senderKind=d.get("senderKind", "participant"),
        )


@dataclass
class ChatState:
    """Group payload for one chat stage within one cohort."""

    messages: list[ChatMessage] = field(default_factory=list)
    readyToEnd: dict[str, bool] = field(default_factory=dict)  # publicId -> flag
    pendingDelivery: dict | None = None  # scheduled agent message waiting its WPM delay
    roundPending: bool = False  # a trigger arrived while a delivery was in flight
    nextRound: int = 0

    def to_dict(self) -> dict:
        return {
            "messages": [m.to_dict() for m in self.messages],
            "readyToEnd": dict(self.readyToEnd),
            "pendingDelivery": dict(self.pendingDelivery) if self.pendingDelivery else None,
            "roundPending": self.roundPending,
            "nextRound": self.nextRound,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChatState":
        return cls(
            messages=[ChatMessage.from_dict(m) for m in d.get("messages", [])],
            readyToEnd=dict(d.get("readyToEnd", {})),
            pendingDelivery=d.get("pendingDelivery"),
            roundPending=d.get("roundPending", False),
            nextRound=d.get("nextRound", 0),
        )


@dataclass
class ElectionState:
    """Group payload for one ranking stage: ballots plus the running tally."""

    ballots: dict[str, list[str]] = field(default_factory=dict)  # voter publicId -> ranking
    result: dict | None = None  # serialized ElectionResult, recomputed per write

    def to_dict(self) -> dict:
        return {"ballots": {k: list(v) for k, v in self.ballots.items()}, "result": self.result}

    @classmethod
    def from_dict(cls, d: dict) -> "ElectionState":
        return cls(
            ballots={k: list(v) for k, v in d.get("ballots", {}).items()},
            result=d.get("result"),
        )


@dataclass
class Cohort:
    id: str
    experimentId: str
    memberPublicIds: list[str] = field(default_factory=list)
    locked: bool = False
    createdAt: float = 0.0
    isLobby: bool = False
    chat: dict[str, ChatState] = field(default_factory=dict)  # stageId -> payload
    elections: dict[str, ElectionState] = field(default_factory=dict)
    reveals: dict[str, dict] = field(default_factory=dict)  # stageId -> frozen snapshot
    payouts: dict[str, dict] = field(default_factory=dict)  # stageId -> {publicId -> row}
    roleAssignments: dict[str, dict[str, str]] = field(default_factory=dict)  # stageId -> publicId -> roleId
    gateOpenedAt: dict[str, float] = field(default_factory=dict)  # stageId -> time
    timerStartedAt: dict[str, float] = field(default_factory=dict)  # "stageId:publicId" -> time

    def group_data(self) -> dict:
        """The spec-shaped groupData map: stageId -> group payload."""
        data: dict[str, dict] = {}
        for sid, chat in self.chat.items():
            data[sid] = {"kind": "chat", **chat.to_dict()}
        for sid, election in self.elections.items():
            data[sid] = {"kind": "election", **election.to_dict()}
        for sid, snapshot in self.reveals.items():
            data[sid] = {"kind": "reveal", "snapshot": snapshot}
        for sid, rows in self.payouts.items():
            data[sid] = {"kind": "payout", "rows": rows}
        for sid, roles in self.roleAssignments.items():
            data[sid] = {"kind": "roles", "assignments": roles}
        return data

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "experimentId": self.experimentId,
            "memberPublicIds": list(self.memberPublicIds),
            "locked": self.locked,
            "createdAt": self.createdAt,
            "isLobby": self.isLobby,
            "chat": {k: v.to_dict() for k, v in self.chat.items()},
            "elections": {k: v.to_dict() for k, v in self.elections.items()},
            "reveals": dict(self.reveals),
            "payouts": dict(self.payouts),
            "roleAssignments": {k: dict(v) for k, v in self.roleAssignments.items()},
            "gateOpenedAt": dict(self.gateOpenedAt),
            "timerStartedAt": dict(self.timerStartedAt),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Cohort":
        return cls(
            id=d["id"],
            experimentId=d["experimentId"],
            memberPublicIds=list(d.get("memberPublicIds", [])),
            locked=d.get("locked", False),
            createdAt=d.get("createdAt", 0.0),
            isLobby=d.get("isLobby", False),
            chat={k: ChatState.from_dict(v) for k, v in d.get("chat", {}).items()},
            elections={k: ElectionState.from_dict(v) for k, v in d.get("elections", {}).items()},
            reveals=dict(d.get("reveals", {})),
            payouts=dict(d.get("payouts", {})),
            roleAssignments={k: dict(v) for k, v in d.get("roleAssignments", {}).items()},
            gateOpenedAt=dict(d.get("gateOpenedAt", {})),
            timerStartedAt=dict(d.get("timerStartedAt", {})),
        )


OFFER_STATES = ("pending", "accepted", "declined", "expired")


@dataclass
class TransferOffer:
    participantPublicId: str
    fromCohortId: str
    toCohortId: str
    expiresAt: float
    state: str = "pending"

    def to_dict(self) -> dict:
        return {
            "participantPublicId": self.participantPublicId,
            "fromCohortId": self.fromCohortId,
            "toCohortId": self.toCohortId,
            "expiresAt": self.expiresAt,
            "state": self.state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransferOffer":
        return cls(
            participantPublicId=d["participantPublicId"],
            fromCohortId=d["fromCohortId"],
            toCohortId=d["toCohortId"],
            expiresAt=d["expiresAt"],
            state=d.get("state", "pending"),
        )


@dataclass
class AgentBinding:
    """One agent template attached to one cohort (instance state)."""

    agentId: str  # unique per (cohort, template) instance; equals publicId for participants
    templateId: str
    cohortId: str
    paused: bool = False
    promptOverride: str | None = None  # live persona replacement, editable mid-run

    def to_dict(self) -> dict:
        return {
            "agentId": self.agentId,
            "templateId": self.templateId,
            "cohortId": self.cohortId,
            "paused": self.paused,
            "promptOverride": self.promptOverride,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AgentBinding":
        return cls(
            agentId=d["agentId"],
            templateId=d["templateId"],
            cohortId=d["cohortId"],
            paused=d.get("paused", False),
            promptOverride=d.get("promptOverride"),
        )
