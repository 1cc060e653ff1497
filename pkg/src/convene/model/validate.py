"""Semantic validation of experiment configs.

Validation is pure and total: any structurally parsed config yields a list of
issues (possibly empty) and never raises. Paths use the same dotted notation
as parse errors so tooling can point at the offending field.
"""

from __future__ import annotations

from dataclasses import dataclass

from convene.model.pseudonyms import PSEUDONYM_SETS
from convene.model.types import (
    ANSWER_REQUIRED_KINDS,
    ChatStageParams,
    ExperimentConfig,
    GROUP_KINDS,
    MIN_TIMER_SECONDS,
    NUMERIC_FIELD_TYPES,
    PayoutStageParams,
    ProfileStageParams,
    PROFILE_DISPLAY_KINDS,
    RankingElectionParams,
    RevealStageParams,
    RoleAssignmentParams,
    StageConfig,
    StageKind,
    SurveyQuestion,
    SurveyStageParams,
    TransferStageParams,
)

ERROR = "error"
WARNING = "warning"


@dataclass(frozen=True)
class ValidationIssue:
    path: str
    severity: str
    message: str


def _issue(report: list[ValidationIssue], path: str, severity: str, message: str) -> None:
    report.append(ValidationIssue(path=path, severity=severity, message=message))


def _check_reference(
    report,
    path: str,
    config: ExperimentConfig,
    from_index: int,
    target_id: str,
    allowed_kinds: tuple[str, ...] | None,
    label: str,
) -> StageConfig | None:
    """A cross-stage reference must resolve to an earlier stage of the right kind."""
    target_index = config.stage_index(target_id)
    if target_index is None:
        _issue(report, path, ERROR, f"{label} references unknown stage {target_id!r}")
        return None
    if target_index >= from_index:
        _issue(
            report,
            path,
            ERROR,
            f"{label} {target_id!r} must precede stage {config.stages[from_index].id!r}",
        )
        return None
    target = config.stages[target_index]
    if allowed_kinds is not None and target.kind not in allowed_kinds:
        _issue(report, path, ERROR, f"{label} {target_id!r} has kind {target.kind}, expected one of {allowed_kinds}")
        return None
    return target


def _validate_questions(report, path: str, stage: StageConfig, questions: list[SurveyQuestion]) -> None:
    seen: set[str] = set()
    for i, q in enumerate(questions):
        qp = f"{path}.questions[{i}]"
        if q.id in seen:
            _issue(report, qp, ERROR, f"duplicate question id {q.id!r}")
        seen.add(q.id)
        if q.kind in ("multipleChoice", "checkbox"):
            if not q.options:
                _issue(report, f"{qp}.options", ERROR, f"{q.kind} question needs at least one option")
            option_ids = [o["id"] for o in q.options]
            if len(option_ids) != len(set(option_ids)):
                _issue(report, f"{qp}.options", ERROR, "duplicate option ids")
            if q.kind == "multipleChoice" and q.correctAnswer is not None and q.correctAnswer not in option_ids:
                _issue(report, f"{qp}.correctAnswer", ERROR, "correctAnswer is not an option id")
        if q.kind == "scale":
            if q.scaleBounds is None:
                _issue(report, f"{qp}.scaleBounds", ERROR, "scale question needs scaleBounds")
            elif q.scaleBounds.min >= q.scaleBounds.max:
                _issue(report, f"{qp}.scaleBounds", ERROR, "scale bounds require min < max")
        if stage.kind == StageKind.COMPREHENSION and q.correctAnswer is None:
            _issue(report, f"{qp}.correctAnswer", ERROR, "comprehension questions require a correctAnswer")


def _validate_transfer(report, path: str, config, index: int, params: TransferStageParams) -> None:
    if params.strategy not in ("byArrivalOrder", "byAttributeComposition"):
        _issue(report, f"{path}.strategy", ERROR, f"unknown strategy {params.strategy!r}")
    if params.targetCohortSize <= 0:
        _issue(report, f"{path}.targetCohortSize", ERROR, "targetCohortSize must be positive")
    if params.timeoutSeconds <= 0:
        _issue(report, f"{path}.timeoutSeconds", ERROR, "timeoutSeconds must be positive")
    if params.strategy == "byAttributeComposition":
        if params.composition is None:
            _issue(report, f"{path}.composition", ERROR, "byAttributeComposition requires composition")
            return
        comp = params.composition
        total = sum(comp.requiredCounts.values())
        if total != params.targetCohortSize:
            _issue(
                report,
                f"{path}.composition.requiredCounts",
                ERROR,
                f"requiredCounts sum to {total}, expected targetCohortSize {params.targetCohortSize}",
            )
        if any(v < 0 for v in comp.requiredCounts.values()):
            _issue(report, f"{path}.composition.requiredCounts", ERROR, "counts must be non-negative")
        survey = _check_reference(
            report,
            f"{path}.composition.surveyStageId",
            config,
            index,
            comp.surveyStageId,
            (StageKind.SURVEY, StageKind.COMPREHENSION, StageKind.PROFILE),
            "composition survey",
        )
        if survey is not None and isinstance(survey.kindParams, SurveyStageParams):
            match = next((q for q in survey.kindParams.questions if q.id == comp.questionId), None)
            if match is None:
                _issue(
                    report,
                    f"{path}.composition.questionId",
                    ERROR,
                    f"question {comp.questionId!r} not found in stage {comp.surveyStageId!r}",
                )
            elif match.kind != "multipleChoice":
                _issue(
                    report,
                    f"{path}.composition.questionId",
                    ERROR,
                    "composition requires a multipleChoice question (answers must be enumerable)",
                )
            else:
                option_ids = {o["id"] for o in match.options}
                for answer in params.composition.requiredCounts:
                    if answer not in option_ids:
                        _issue(
                            report,
                            f"{path}.composition.requiredCounts.{answer}",
                            ERROR,
                            f"answer {answer!r} is not an option of question {comp.questionId!r}",
                        )


def _validate_payout(report, path: str, config, index: int, params: PayoutStageParams) -> None:
    for i, item in enumerate(params.items):
        ip = f"{path}.items[{i}]"
        if item.amountMinor < 0:
            _issue(report, f"{ip}.amountMinor", ERROR, "amounts must be non-negative")
        if item.scope not in ("cohort", "participant"):
            _issue(report, f"{ip}.scope", ERROR, f"unknown scope {item.scope!r}")
        if item.kind == "fixedCompletion":
            if not item.stageIds:
                _issue(report, f"{ip}.stageIds", ERROR, "fixedCompletion requires stageIds")
            for sid in item.stageIds:
                _check_reference(report, f"{ip}.stageIds", config, index, sid, None, "payout source")
        elif item.kind == "quizPerformance":
            if item.surveyStageId is None:
                _issue(report, f"{ip}.surveyStageId", ERROR, "quizPerformance requires surveyStageId")
            else:
                survey = _check_reference(
                    report,
                    f"{ip}.surveyStageId",
                    config,
                    index,
                    item.surveyStageId,
                    (StageKind.SURVEY, StageKind.COMPREHENSION),
                    "quiz survey",
                )
                if survey is not None and isinstance(survey.kindParams, SurveyStageParams):
                    if not any(q.correctAnswer is not None for q in survey.kindParams.questions):
                        _issue(
                            report,
                            f"{ip}.surveyStageId",
                            ERROR,
                            f"stage {item.surveyStageId!r} has no scored questions (correctAnswer)",
                        )
        elif item.kind == "randomCondition":
            if not item.options:
                _issue(report, f"{ip}.options", ERROR, "randomCondition requires options")
            else:
                total = sum(o["probability"] for o in item.options)
                if abs(total - 1.0) > 1e-9:
                    _issue(report, f"{ip}.options", ERROR, f"probabilities sum to {total}, expected 1.0")
                if any(o["probability"] < 0 for o in item.options):
                    _issue(report, f"{ip}.options", ERROR, "probabilities must be non-negative")
                if any(o["amountMinor"] < 0 for o in item.options):
                    _issue(report, f"{ip}.options", ERROR, "amounts must be non-negative")
        elif item.kind == "leaderPerformance":
            if item.electionStageId is None:
                _issue(report, f"{ip}.electionStageId", ERROR, "leaderPerformance requires electionStageId")
            else:
                election = _check_reference(
                    report,
                    f"{ip}.electionStageId",
                    config,
                    index,
                    item.electionStageId,
                    (StageKind.RANKING_ELECTION,),
                    "election",
                )
                if election is not None and isinstance(election.kindParams, RankingElectionParams):
                    if not election.kindParams.electionEnabled:
                        _issue(report, f"{ip}.electionStageId", ERROR, "referenced ranking stage has no election")
                    if election.kindParams.mode != "peers":
                        _issue(report, f"{ip}.electionStageId", ERROR, "leaderPerformance requires a peer election")
            if item.surveyStageId is None:
                _issue(report, f"{ip}.surveyStageId", ERROR, "leaderPerformance requires surveyStageId (the leader task)")
            else:
                survey = _check_reference(
                    report,
                    f"{ip}.surveyStageId",
                    config,
                    index,
                    item.surveyStageId,
                    (StageKind.SURVEY, StageKind.COMPREHENSION),
                    "leader task survey",
                )
                if survey is not None and isinstance(survey.kindParams, SurveyStageParams):
                    if not any(q.correctAnswer is not None for q in survey.kindParams.questions):
                        _issue(
                            report,
                            f"{ip}.surveyStageId",
                            ERROR,
                            f"stage {item.surveyStageId!r} has no scored questions (correctAnswer)",
                        )


def _validate_stage(report, config: ExperimentConfig, index: int, stage: StageConfig) -> None:
    path = f"stages[{index}]"
    if not stage.id:
        _issue(report, f"{path}.id", ERROR, "stage id must be non-empty")
    if stage.ui.waitForAllParticipants and stage.kind not in GROUP_KINDS:
        _issue(
            report,
            f"{path}.ui.waitForAllParticipants",
            ERROR,
            f"waitForAllParticipants is only allowed on group kinds {GROUP_KINDS}",
        )
    if stage.ui.autoAdvanceTimerSeconds is not None and stage.ui.autoAdvanceTimerSeconds < MIN_TIMER_SECONDS:
        _issue(
            report,
            f"{path}.ui.autoAdvanceTimerSeconds",
            ERROR,
            f"timer must be at least {MIN_TIMER_SECONDS} seconds",
        )
    params = stage.kindParams
    pp = f"{path}.kindParams"
    if isinstance(params, ProfileStageParams):
        if params.mode not in ("selfChosen", "assignedPseudonym"):
            _issue(report, f"{pp}.mode", ERROR, f"unknown profile mode {params.mode!r}")
        if params.mode == "assignedPseudonym":
            if params.pseudonymSet is None:
                _issue(report, f"{pp}.pseudonymSet", ERROR, "assignedPseudonym requires pseudonymSet")
            elif params.pseudonymSet not in PSEUDONYM_SETS:
                _issue(report, f"{pp}.pseudonymSet", ERROR, f"unknown pseudonym set {params.pseudonymSet!r}")
        elif params.pseudonymSet is not None:
            _issue(report, f"{pp}.pseudonymSet", ERROR, "pseudonymSet is only allowed with assignedPseudonym")
    elif isinstance(params, SurveyStageParams):
        _validate_questions(report, pp, stage, params.questions)
        if not params.questions and stage.kind in ANSWER_REQUIRED_KINDS and stage.kind != StageKind.TERMS_OF_SERVICE:
            _issue(report, f"{pp}.questions", WARNING, "stage has no questions")
        if params.perParticipant and stage.kind != StageKind.SURVEY_PER_PARTICIPANT:
            _issue(report, f"{pp}.perParticipant", ERROR, "perParticipant applies only to SurveyPerParticipant stages")
    elif isinstance(params, ChatStageParams):
        if params.selection not in ("wpmWeighted", "fastestWins"):
            _issue(report, f"{pp}.selection", ERROR, f"unknown selection rule {params.selection!r}")
        if isinstance(params.endChatQuorum, int) and params.endChatQuorum < 1:
            _issue(report, f"{pp}.endChatQuorum", ERROR, "quorum must be at least 1")
        for j, agent_id in enumerate(params.mediatorAgentIds):
            agent = config.agent_by_id(agent_id)
            if agent is None:
                _issue(report, f"{pp}.mediatorAgentIds[{j}]", ERROR, f"unknown agent template {agent_id!r}")
            elif agent.role != "mediator":
                _issue(report, f"{pp}.mediatorAgentIds[{j}]", ERROR, f"agent {agent_id!r} is not a mediator")
    elif isinstance(params, TransferStageParams):
        _validate_transfer(report, pp, config, index, params)
    elif isinstance(params, RankingElectionParams):
        if params.mode not in ("peers", "items"):
            _issue(report, f"{pp}.mode", ERROR, f"unknown ranking mode {params.mode!r}")
        if params.mode == "items" and not params.items:
            _issue(report, f"{pp}.items", ERROR, "item ranking requires items")
        if params.mode == "peers" and params.items:
            _issue(report, f"{pp}.items", ERROR, "peer ranking must not list items")
        item_ids = [it["id"] for it in params.items]
        if len(item_ids) != len(set(item_ids)):
            _issue(report, f"{pp}.items", ERROR, "duplicate item ids")
    elif isinstance(params, RevealStageParams):
        if not params.sources:
            _issue(report, f"{pp}.sources", WARNING, "reveal has no sources")
        for j, source in enumerate(params.sources):
            _check_reference(report, f"{pp}.sources[{j}]", config, index, source, None, "reveal source")
    elif isinstance(params, PayoutStageParams):
        _validate_payout(report, pp, config, index, params)
    elif isinstance(params, RoleAssignmentParams):
        if not params.roles:
            _issue(report, f"{pp}.roles", ERROR, "role assignment requires at least one role")
        role_ids = [r.roleId for r in params.roles]
        if len(role_ids) != len(set(role_ids)):
            _issue(report, f"{pp}.roles", ERROR, "duplicate role ids")


def _validate_agents(report, config: ExperimentConfig) -> None:
    seen: set[str] = set()
    stage_ids = {s.id for s in config.stages}
    for i, agent in enumerate(config.agentTemplates):
        ap = f"agentTemplates[{i}]"
        if agent.id in seen:
            _issue(report, ap, ERROR, f"duplicate agent id {agent.id!r}")
        seen.add(agent.id)
        if agent.wpm <= 0:
            _issue(report, f"{ap}.wpm", ERROR, "wpm must be positive")
        field_names = [f.fieldName for f in agent.structuredOutputSchema]
        if len(field_names) != len(set(field_names)):
            _issue(report, f"{ap}.structuredOutputSchema", ERROR, "duplicate field names")
        if agent.responseGate is not None:
            field = next(
                (f for f in agent.structuredOutputSchema if f.fieldName == agent.responseGate.fieldName),
                None,
            )
            if field is None:
                _issue(
                    report,
                    f"{ap}.responseGate.fieldName",
                    ERROR,
                    f"gated field {agent.responseGate.fieldName!r} is not in the output schema",
                )
            elif field.fieldType not in NUMERIC_FIELD_TYPES:
                _issue(report, f"{ap}.responseGate.fieldName", ERROR, "gated field must be numeric (int or real)")
        for j, item in enumerate(agent.promptPlan):
            if item.kind == "stageContextRef" and item.stageId not in stage_ids:
                _issue(
                    report,
                    f"{ap}.promptPlan[{j}].stageId",
                    ERROR,
                    f"prompt references unknown stage {item.stageId!r}",
                )


def validate_experiment_config(config: ExperimentConfig) -> list[ValidationIssue]:
    report: list[ValidationIssue] = []
    if not config.id:
        _issue(report, "id", ERROR, "experiment id must be non-empty")
    if not config.metadata.name:
        _issue(report, "metadata.name", WARNING, "experiment name is empty")
    if not config.stages:
        _issue(report, "stages", ERROR, "experiment needs at least one stage")

    seen_ids: set[str] = set()
    for i, stage in enumerate(config.stages):
        if stage.id in seen_ids:
            _issue(report, f"stages[{i}].id", ERROR, f"duplicate stage id {stage.id!r}")
        seen_ids.add(stage.id)

    creators = [who for who, role in config.roles.items() if role == "creator"]
    if len(creators) != 1:
        _issue(report, "roles", ERROR, f"exactly one creator required, found {len(creators)}")

    first_profile = next(
        (i for i, s in enumerate(config.stages) if s.kind == StageKind.PROFILE),
        None,
    )
    for i, stage in enumerate(config.stages):
        if stage.kind in PROFILE_DISPLAY_KINDS and (first_profile is None or first_profile > i):
            _issue(
                report,
                f"stages[{i}]",
                ERROR,
                f"{stage.kind} stage {stage.id!r} displays profiles but no Profile stage precedes it",
            )
        if stage.kind == StageKind.SURVEY_PER_PARTICIPANT and (first_profile is None or first_profile > i):
            _issue(
                report,
                f"stages[{i}]",
                WARNING,
                "per-participant survey without a preceding Profile stage falls back to public ids",
            )
        _validate_stage(report, config, i, stage)

    _validate_agents(report, config)
    return report


def has_errors(report: list[ValidationIssue]) -> bool:
    return any(issue.severity == ERROR for issue in report)
