from convene.api.app import ExperimentHost, Ticker, create_app
from convene.api.auth import Allowlist, token_hash, write_allowlist
from convene.api.streams import (
    FrameBuilder,
    StreamHub,
    Subscription,
    TOPIC_COHORT,
    TOPIC_DEBUG,
    TOPIC_PARTICIPANT,
    cohort_topic,
    debug_topic,
    participant_topic,
)

__all__ = [
    "Allowlist",
    "ExperimentHost",
    "FrameBuilder",
    "StreamHub",
    "Subscription",
    "TOPIC_COHORT",
    "TOPIC_DEBUG",
    "TOPIC_PARTICIPANT",
    "Ticker",
    "cohort_topic",
    "create_app",
    "debug_topic",
    "participant_topic",
    "token_hash",
    "write_allowlist",
]
