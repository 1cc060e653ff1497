"""Experiment configuration language: types, parsing, validation, forking."""

from convene.model.types import (
    AgentModelConfig,
    AgentSpec,
    ExperimentConfig,
    ExperimentMetadata,
    ChatStageParams,
    PayoutItem,
    PayoutStageParams,
    ProfileStageParams,
    PromptItem,
    RankingElectionParams,
    RevealStageParams,
    RoleAssignmentParams,
    RoleDef,
    RuntimeSettings,
    SamplingParams,
    ScaleBounds,
    StageConfig,
    StageKind,
    StageUi,
    StructuredField,
    SurveyQuestion,
    SurveyStageParams,
    TransferComposition,
    TransferStageParams,
    ANSWER_REQUIRED_KINDS,
    GROUP_KINDS,
    MANDATORY_OUTPUT_FIELDS,
)
from convene.model.parse import (
    canonical_dumps,
    canonicalize,
    parse_experiment_config,
    experiment_config_to_dict,
)
from convene.model.validate import ValidationIssue, validate_experiment_config
from convene.model.fork import fork_experiment
from convene.model.pseudonyms import PSEUDONYM_SETS

__all__ = [
    "AgentModelConfig",
    "AgentSpec",
    "ExperimentConfig",
    "ExperimentMetadata",
    "ChatStageParams",
    "PayoutItem",
    "PayoutStageParams",
    "ProfileStageParams",
    "PromptItem",
    "RankingElectionParams",
    "RevealStageParams",
    "RoleAssignmentParams",
    "RoleDef",
    "RuntimeSettings",
    "SamplingParams",
    "ScaleBounds",
    "StageConfig",
    "StageKind",
    "StageUi",
    "StructuredField",
    "SurveyQuestion",
    "SurveyStageParams",
    "TransferComposition",
    "TransferStageParams",
    "ANSWER_REQUIRED_KINDS",
    "GROUP_KINDS",
    "MANDATORY_OUTPUT_FIELDS",
    "canonical_dumps",
    "canonicalize",
    "parse_experiment_config",
    "experiment_config_to_dict",
    "ValidationIssue",
    "validate_experiment_config",
    "fork_experiment",
    "PSEUDONYM_SETS",
]
