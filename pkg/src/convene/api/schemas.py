"""Request and response envelopes for the HTTP surface.

Bodies are validated at the edge; everything past this layer works with the
engine's own types. Responses deliberately mirror the engine's view dicts
rather than remodeling them, so the wire shape and the engine shape cannot
drift apart.
"""

from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, Field


class CreateExperimentRequest(BaseModel):
    config: dict
    seed: str | None = None


class CreateExperimentResponse(BaseModel):
    experimentId: str
    seed: str


class MetadataPatchRequest(BaseModel):
    name: str | None = None
    description: str | None = None
    publicVisibility: bool | None = None
    prolificRedirectUrl: str | None = None
    prolificCompletionCode: str | None = None

    def as_patch(self) -> dict:
        return {k: v for k, v in self.model_dump().items() if v is not None}


class CreateCohortRequest(BaseModel):
    isLobby: bool = False


class CreateCohortResponse(BaseModel):
    cohortId: str


class MintParticipantsRequest(BaseModel):
    count: int = Field(default=1, ge=1, le=500)
    externalIds: list[str] | None = None


class MintedSlot(BaseModel):
    publicId: str
    privateId: str
    joinUrl: str


class MintParticipantsResponse(BaseModel):
    participants: list[MintedSlot]


class CreateTransferRequest(BaseModel):
    publicId: str


class BootRequest(BaseModel):
    reason: str = "facilitator"


class AttentionRequest(BaseModel):
    deadlineSeconds: int = Field(default=60, ge=1)


class MessageRequest(BaseModel):
    text: str
    publicIds: list[str] | None = None
    cohortId: str | None = None


class LockRequest(BaseModel):
    locked: bool = True


class PauseAgentRequest(BaseModel):
    cohortId: str
    paused: bool = True


class AgentTemplatePatch(BaseModel):
    promptPlan: list[dict] | None = None
    personaPrompt: str | None = None
    wpm: int | None = Field(default=None, ge=1)
    samplingParams: dict | None = None


class RegisterKeyRequest(BaseModel):
    providerId: str
    keyMaterial: str
    endpointUrl: str = ""


class RegisterKeyResponse(BaseModel):
    ref: str


class ReplaceStagesRequest(BaseModel):
    config: dict


class ResolveAlertRequest(BaseModel):
    response: str = ""


ParticipantActionKind = Literal[
    "submitAnswer",
    "sendChatMessage",
    "acceptTransfer",
    "acknowledgeAttentionCheck",
    "raiseAlert",
    "heartbeat",
    "endChatVote",
]


class ParticipantActionRequest(BaseModel):
    """One envelope for every participant verb; `action` picks the branch."""

    action: ParticipantActionKind
    answer: dict | None = None  # submitAnswer
    text: str | None = None  # sendChatMessage, raiseAlert
    accept: bool | None = None  # acceptTransfer
    ready: bool | None = None  # endChatVote


class ActionAck(BaseModel):
    ok: bool = True
    sequence: int | None = None
    result: dict[str, Any] = Field(default_factory=dict)


class ErrorBody(BaseModel):
    error: str  # machine-readable reason: the engine error class name
    message: str
