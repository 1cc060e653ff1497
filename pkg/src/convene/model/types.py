"""Configuration types for an experiment.

An experiment is an ordered list of stages plus metadata, agent templates,
and an access-role map. These dataclasses are the in-memory form of the
canonical config document; ``convene.model.parse`` owns the (de)serialization
and ``convene.model.validate`` owns the cross-field rules.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace


class StageKind:
    TERMS_OF_SERVICE = "TermsOfService"
    INFO = "Info"
    PROFILE = "Profile"
    GROUP_CHAT = "GroupChat"
    PRIVATE_CHAT = "PrivateChat"
    TRANSFER = "Transfer"
    SURVEY = "Survey"
    SURVEY_PER_PARTICIPANT = "SurveyPerParticipant"
    COMPREHENSION = "Comprehension"
    RANKING_ELECTION = "RankingElection"
    REVEAL = "Reveal"
    PAYOUT = "Payout"
    ROLE_ASSIGNMENT = "RoleAssignment"

    ALL = (
        TERMS_OF_SERVICE,
        INFO,
        PROFILE,
        GROUP_CHAT,
        PRIVATE_CHAT,
        TRANSFER,
        SURVEY,
        SURVEY_PER_PARTICIPANT,
        COMPREHENSION,
        RANKING_ELECTION,
        REVEAL,
        PAYOUT,
        ROLE_ASSIGNMENT,
    )


# Stage kinds that may synchronize on the whole group arriving.
GROUP_KINDS = (
    StageKind.GROUP_CHAT,
    StageKind.RANKING_ELECTION,
    StageKind.REVEAL,
    StageKind.TRANSFER,
)

# Stage kinds whose advancement requires a submitted answer.
ANSWER_REQUIRED_KINDS = (
    StageKind.TERMS_OF_SERVICE,
    StageKind.PROFILE,
    StageKind.SURVEY,
    StageKind.SURVEY_PER_PARTICIPANT,
    StageKind.COMPREHENSION,
    StageKind.RANKING_ELECTION,
)

# Stage kinds that display participant profiles and therefore need a
# Profile stage earlier in the sequence.
# Kinds that render other members' profiles and therefore need a Profile
# stage earlier in the sequence. SurveyPerParticipant also shows peers but
# degrades to public ids, so it only warns.
PROFILE_DISPLAY_KINDS = (
    StageKind.GROUP_CHAT,
    StageKind.PRIVATE_CHAT,
    StageKind.RANKING_ELECTION,
    StageKind.REVEAL,
)

MIN_TIMER_SECONDS = 5


@dataclass
class StageUi:
    showProgressBar: bool = True
    waitForAllParticipants: bool = False
    autoAdvanceTimerSeconds: int | None = None


@dataclass
class ScaleBounds:
    min: int
    max: int
    minLabel: str | None = None
    maxLabel: str | None = None


@dataclass
class SurveyQuestion:
    id: str
    kind: str  # freeform | multipleChoice | checkbox | scale
    prompt: str
    options: list[dict] = field(default_factory=list)  # [{id, text}]
    scaleBounds: ScaleBounds | None = None
    correctAnswer: object = None

    KINDS = ("freeform", "multipleChoice", "checkbox", "scale")


@dataclass
class ProfileStageParams:
    mode: str  # selfChosen | assignedPseudonym
    pseudonymSet: str | None = None  # animal | nature | numeric


@dataclass
class SurveyStageParams:
    questions: list[SurveyQuestion] = field(default_factory=list)
    perParticipant: bool = False  # SurveyPerParticipant only
    excludeSelf: bool = False  # per-participant expansion skips the answering member


@dataclass
class ChatStageParams:
    mediatorAgentIds: list[str] = field(default_factory=list)
    requireEndChatConsensus: bool = False
    endChatQuorum: object = "all"  # "all" or int
    disableWpmThrottle: bool = False
    selection: str = "wpmWeighted"  # wpmWeighted | fastestWins


@dataclass
class TransferComposition:
    surveyStageId: str
    questionId: str
    requiredCounts: dict[str, int] = field(default_factory=dict)


@dataclass
class TransferStageParams:
    strategy: str  # byArrivalOrder | byAttributeComposition
    targetCohortSize: int
    composition: TransferComposition | None = None
    timeoutSeconds: int = 600


@dataclass
class RankingElectionParams:
    mode: str = "peers"  # peers | items
    items: list[dict] = field(default_factory=list)  # [{id, text}]
    selfVoteAllowed: bool = False
    electionEnabled: bool = True


@dataclass
class RevealStageParams:
    sources: list[str] = field(default_factory=list)  # earlier stage ids


@dataclass
class PayoutItem:
    kind: str  # fixedCompletion | quizPerformance | randomCondition | leaderPerformance
    amountMinor: int = 0
    stageIds: list[str] = field(default_factory=list)  # fixedCompletion
    surveyStageId: str | None = None  # quizPerformance / leaderPerformance
    electionStageId: str | None = None  # leaderPerformance
    options: list[dict] = field(default_factory=list)  # randomCondition: [{amountMinor, probability}]
    scope: str = "cohort"  # randomCondition: cohort | participant

    KINDS = ("fixedCompletion", "quizPerformance", "randomCondition", "leaderPerformance")


@dataclass
class PayoutStageParams:
    currencyUnit: str = "USD"
    items: list[PayoutItem] = field(default_factory=list)


@dataclass
class RoleDef:
    roleId: str
    name: str
    markdownBody: str = ""


@dataclass
class RoleAssignmentParams:
    roles: list[RoleDef] = field(default_factory=list)


PARAMS_BY_KIND = {
    StageKind.TERMS_OF_SERVICE: None,
    StageKind.INFO: None,
    StageKind.PROFILE: ProfileStageParams,
    StageKind.GROUP_CHAT: ChatStageParams,
    StageKind.PRIVATE_CHAT: ChatStageParams,
    StageKind.TRANSFER: TransferStageParams,
    StageKind.SURVEY: SurveyStageParams,
    StageKind.SURVEY_PER_PARTICIPANT: SurveyStageParams,
    StageKind.COMPREHENSION: SurveyStageParams,
    StageKind.RANKING_ELECTION: RankingElectionParams,
    StageKind.REVEAL: RevealStageParams,
    StageKind.PAYOUT: PayoutStageParams,
    StageKind.ROLE_ASSIGNMENT: RoleAssignmentParams,
}


@dataclass
class StageConfig:
    id: str
    kind: str
    title: str
    markdownBody: str = ""
    ui: StageUi = field(default_factory=StageUi)
    kindParams: object = None


# ---------------------------------------------------------------------------
# Agents


# Structured-output fields every agent schema must contain; they are injected
# during normalization when the experimenter omits them.
MANDATORY_OUTPUT_FIELDS = (
    ("shouldRespond", "bool", "Whether the agent wants to send a message now."),
    ("response", "text", "The message to send when responding."),
    ("readyToEndChat", "bool", "Whether the agent considers the conversation finished."),
)

NUMERIC_FIELD_TYPES = ("int", "real")
FIELD_TYPES = ("bool", "int", "real", "text")


@dataclass
class StructuredField:
    fieldName: str
    fieldType: str  # bool | int | real | text
    description: str = ""


@dataclass
class PromptItem:
    kind: str  # profileBlock | systemInstructions | stageContextRef | chatHistory | customText | pseudonymGuard
    text: str | None = None  # customText
    stageId: str | None = None  # stageContextRef

    KINDS = (
        "profileBlock",
        "systemInstructions",
        "stageContextRef",
        "chatHistory",
        "customText",
        "pseudonymGuard",
    )


@dataclass
class SamplingParams:
    temperature: float = 0.7
    maxOutputTokens: int = 1024


@dataclass
class AgentModelConfig:
    providerId: str = "scripted"
    modelName: str = "default"
    samplingParams: SamplingParams = field(default_factory=SamplingParams)


@dataclass
class ResponseGate:
    fieldName: str
    threshold: float


@dataclass
class AgentSpec:
    id: str
    role: str  # participant | mediator
    profile: dict = field(default_factory=dict)  # {displayName, avatar}
    personaPrompt: str | None = None  # participants only
    promptPlan: list[PromptItem] = field(default_factory=list)
    model: AgentModelConfig = field(default_factory=AgentModelConfig)
    wpm: float = 60.0
    structuredOutputSchema: list[StructuredField] = field(default_factory=list)
    responseGate: ResponseGate | None = None

    def normalized(self) -> "AgentSpec":
        """Return a copy whose schema is guaranteed to carry the mandatory fields."""
        present = {f.fieldName for f in self.structuredOutputSchema}
        schema = list(self.structuredOutputSchema)
        for name, ftype, desc in MANDATORY_OUTPUT_FIELDS:
            if name not in present:
                schema.append(StructuredField(fieldName=name, fieldType=ftype, description=desc))
        return replace(self, structuredOutputSchema=schema)


# ---------------------------------------------------------------------------
# Experiment


@dataclass
class ExperimentMetadata:
    name: str
    description: str = ""
    publicVisibility: bool = False
    prolificRedirectUrl: str | None = None
    prolificCompletionCode: str | None = None
    template: bool = False


@dataclass
class RuntimeSettings:
    """Tunable timing knobs; defaults suit a four-person live session."""

    heartbeatIntervalSeconds: int = 15
    missedHeartbeatsForDisconnect: int = 2
    idleThresholdSeconds: int = 60
    transferOfferExpirySeconds: int = 120
    lobbyMatchTickSeconds: int = 5


ROLE_LEVELS = {"reader": 0, "editor": 1, "creator": 2}


@dataclass
class ExperimentConfig:
    id: str
    metadata: ExperimentMetadata
    stages: list[StageConfig] = field(default_factory=list)
    agentTemplates: list[AgentSpec] = field(default_factory=list)
    roles: dict[str, str] = field(default_factory=dict)  # experimenter identity -> role
    settings: RuntimeSettings = field(default_factory=RuntimeSettings)

    def stage_by_id(self, stage_id: str) -> StageConfig | None:
        for s in self.stages:
            if s.id == stage_id:
                return s
        return None

    def stage_index(self, stage_id: str) -> int | None:
        for i, s in enumerate(self.stages):
            if s.id == stage_id:
                return i
        return None

    def agent_by_id(self, agent_id: str) -> AgentSpec | None:
        for a in self.agentTemplates:
            if a.id == agent_id:
                return a
        return None

    def creator(self) -> str | None:
        for identity, role in self.roles.items():
            if role == "creator":
                return identity
        return None

    def role_of(self, identity: str) -> str | None:
        return self.roles.get(identity)

    def has_role(self, identity: str, at_least: str) -> bool:
        role = self.roles.get(identity)
        if role is None:
            return False
        return ROLE_LEVELS[role] >= ROLE_LEVELS[at_least]
