"""Stage progression, cohort management, and experiment state."""

from convene.engine.records import (
    AgentBinding,
    AnswerRecord,
    ChatMessage,
    ChatState,
    Cohort,
    ParticipantRecord,
    Profile,
    TransferOffer,
)
from convene.engine.state import ExperimentState, apply_event, initial_state, replay

__all__ = [
    "AgentBinding",
    "AnswerRecord",
    "ChatMessage",
    "ChatState",
    "Cohort",
    "ExperimentState",
    "ParticipantRecord",
    "Profile",
    "TransferOffer",
    "apply_event",
    "initial_state",
    "replay",
]
