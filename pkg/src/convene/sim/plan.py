"""Simulation plans: the scripted cast and stop rules for a headless run.

A plan names an experiment config, a roster of scripted participants that is
replicated into every simulated cohort, a scripted LLM provider, a seed, and
a stop condition. Plans are validated before anything starts: every stage
whose advancement needs submitted content must be covered by every script,
so a run cannot wedge halfway because someone forgot the election ballot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from convene.errors import ConfigParseError
from convene.model.parse import parse_experiment_config
from convene.model.types import (
    ExperimentConfig,
    ProfileStageParams,
    StageKind,
)
from convene.model.validate import ValidationIssue, has_errors, validate_experiment_config

ERROR = "error"

# Stage kinds a script must cover: advancing them needs real content that
# the runner cannot invent (chat readiness and plain advances it can).
SCRIPTED_CONTENT_KINDS = (
    StageKind.TERMS_OF_SERVICE,
    StageKind.SURVEY,
    StageKind.SURVEY_PER_PARTICIPANT,
    StageKind.COMPREHENSION,
    StageKind.RANKING_ELECTION,
)

STOP_ALL_TERMINAL = "allTerminal"
STOP_MAX_SIM_SECONDS = "maxSimSeconds"


@dataclass(frozen=True)
class StopCondition:
    kind: str = STOP_ALL_TERMINAL
    maxSimSeconds: float | None = None


@dataclass
class ParticipantScript:
    """Per-stage scripted actions for one simulated human.

    `stages` maps stage id to an action spec; the runner interprets it by
    stage kind (acknowledge, displayName, answers, ranking, messages, accept).
    Election rankings name peers by externalId; the runner resolves the
    minted publicIds at run time.
    """

    externalId: str
    stages: dict[str, dict] = field(default_factory=dict)
    jitterSeconds: float = 0.0
    acknowledgeAttention: bool = True


@dataclass
class SimulationPlan:
    config: ExperimentConfig
    config_doc: dict
    participants: list[ParticipantScript]
    seed: str = "sim"
    cohortCount: int = 1
    stopCondition: StopCondition = field(default_factory=StopCondition)
    providerScript: dict = field(default_factory=dict)


def _load_inline_or_path(value, base_dir: Path | None, label: str):
    """Plan fields that may inline a document or point at a JSON file."""
    if isinstance(value, dict):
        return value
    if isinstance(value, str):
        path = Path(value)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        try:
            return json.loads(path.read_text())
        except OSError as e:
            raise ConfigParseError(label, f"cannot read {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigParseError(label, f"{path} is not valid JSON: {e}") from e
    raise ConfigParseError(label, "expected an inline object or a file path")


def _parse_stop_condition(doc) -> StopCondition:
    if doc is None:
        return StopCondition()
    if not isinstance(doc, dict):
        raise ConfigParseError("stopCondition", "expected an object")
    if doc.get(STOP_ALL_TERMINAL):
        return StopCondition(kind=STOP_ALL_TERMINAL)
    if STOP_MAX_SIM_SECONDS in doc:
        limit = doc[STOP_MAX_SIM_SECONDS]
        if not isinstance(limit, (int, float)) or isinstance(limit, bool) or limit <= 0:
            raise ConfigParseError("stopCondition.maxSimSeconds", "expected a positive number")
        return StopCondition(kind=STOP_MAX_SIM_SECONDS, maxSimSeconds=float(limit))
    raise ConfigParseError("stopCondition", "expected allTerminal or maxSimSeconds")


def _parse_participant(index: int, doc) -> ParticipantScript:
    path = f"participants[{index}]"
    if not isinstance(doc, dict):
        raise ConfigParseError(path, "expected an object")
    external = doc.get("externalId")
    if not isinstance(external, str) or not external:
        raise ConfigParseError(f"{path}.externalId", "expected a non-empty string")
    stages = doc.get("stages", {})
    if not isinstance(stages, dict) or any(not isinstance(v, dict) for v in stages.values()):
        raise ConfigParseError(f"{path}.stages", "expected an object of stageId -> action spec")
    jitter = doc.get("jitterSeconds", 0.0)
    if not isinstance(jitter, (int, float)) or isinstance(jitter, bool) or jitter < 0:
        raise ConfigParseError(f"{path}.jitterSeconds", "expected a non-negative number")
    return ParticipantScript(
        externalId=external,
        stages={k: dict(v) for k, v in stages.items()},
        jitterSeconds=float(jitter),
        acknowledgeAttention=bool(doc.get("acknowledgeAttention", True)),
    )


def parse_simulation_plan(doc: dict, base_dir: str | Path | None = None) -> SimulationPlan:
    """Structural parse; raises ConfigParseError at the first bad field."""
    if not isinstance(doc, dict):
        raise ConfigParseError("", "plan must be an object")
    base = Path(base_dir) if base_dir is not None else None
    if "experimentConfig" not in doc:
        raise ConfigParseError("experimentConfig", "missing")
    config_doc = _load_inline_or_path(doc["experimentConfig"], base, "experimentConfig")
    config = parse_experiment_config(config_doc)
    participants_doc = doc.get("participants")
    if not isinstance(participants_doc, list) or not participants_doc:
        raise ConfigParseError("participants", "expected a non-empty list")
    participants = [_parse_participant(i, p) for i, p in enumerate(participants_doc)]
    cohort_count = doc.get("cohortCount", 1)
    if not isinstance(cohort_count, int) or isinstance(cohort_count, bool) or cohort_count < 1:
        raise ConfigParseError("cohortCount", "expected a positive integer")
    seed = doc.get("seed", "sim")
    if not isinstance(seed, str) or not seed:
        raise ConfigParseError("seed", "expected a non-empty string")
    provider_script = doc.get("providerScript", {})
    if provider_script:
        provider_script = _load_inline_or_path(provider_script, base, "providerScript")
    return SimulationPlan(
        config=config,
        config_doc=config_doc,
        participants=participants,
        seed=seed,
        cohortCount=cohort_count,
        stopCondition=_parse_stop_condition(doc.get("stopCondition")),
        providerScript=provider_script,
    )


def _needs_script_content(stage) -> bool:
    if stage.kind in SCRIPTED_CONTENT_KINDS:
        return True
    params = stage.kindParams
    if isinstance(params, ProfileStageParams) and params.mode == "selfChosen":
        return True
    return False


def _stage_coverage_issue(stage, script: ParticipantScript, index: int) -> str | None:
    spec = script.stages.get(stage.id)
    path = f"participants[{index}].stages.{stage.id}"
    if spec is None:
        return f"{path}: {script.externalId!r} has no script for required stage {stage.id!r} ({stage.kind})"
    if stage.kind == StageKind.TERMS_OF_SERVICE and not spec.get("acknowledge"):
        return f"{path}: must acknowledge the terms stage"
    if stage.kind == StageKind.PROFILE and not spec.get("displayName"):
        return f"{path}: self-chosen profile needs a displayName"
    if stage.kind in (StageKind.SURVEY, StageKind.SURVEY_PER_PARTICIPANT, StageKind.COMPREHENSION):
        if not isinstance(spec.get("answers"), dict) or not spec["answers"]:
            return f"{path}: needs an answers object"
    if stage.kind == StageKind.RANKING_ELECTION:
        ranking = spec.get("ranking")
        if not isinstance(ranking, list) or not ranking:
            return f"{path}: needs a ranking list of peer externalIds"
    return None


def validate_simulation_plan(plan: SimulationPlan) -> list[ValidationIssue]:
    """Coverage rule plus the underlying config's own validation."""
    report = list(validate_experiment_config(plan.config))
    seen: set[str] = set()
    for index, script in enumerate(plan.participants):
        if script.externalId in seen:
            report.append(
                ValidationIssue(
                    path=f"participants[{index}].externalId",
                    severity=ERROR,
                    message=f"duplicate externalId {script.externalId!r}",
                )
            )
        seen.add(script.externalId)
        known_stage_ids = {s.id for s in plan.config.stages}
        for stage_id in script.stages:
            if stage_id not in known_stage_ids:
                report.append(
                    ValidationIssue(
                        path=f"participants[{index}].stages.{stage_id}",
                        severity=ERROR,
                        message=f"script references unknown stage {stage_id!r}",
                    )
                )
        for stage in plan.config.stages:
            if not _needs_script_content(stage):
                continue
            problem = _stage_coverage_issue(stage, script, index)
            if problem is not None:
                report.append(ValidationIssue(path=stage.id, severity=ERROR, message=problem))
    peer_ids = seen
    for index, script in enumerate(plan.participants):
        for stage in plan.config.stages:
            if stage.kind != StageKind.RANKING_ELECTION:
                continue
            ranking = script.stages.get(stage.id, {}).get("ranking")
            if not isinstance(ranking, list):
                continue
            for name in ranking:
                if name not in peer_ids:
                    report.append(
                        ValidationIssue(
                            path=f"participants[{index}].stages.{stage.id}",
                            severity=ERROR,
                            message=f"ranking names unknown participant {name!r}",
                        )
                    )
    return report


def load_simulation_plan(path: str | Path) -> SimulationPlan:
    """Read, parse, and fully validate a plan file; raises on any error."""
    plan_path = Path(path)
    try:
        doc = json.loads(plan_path.read_text())
    except OSError as e:
        raise ConfigParseError(str(plan_path), f"cannot read plan: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigParseError(str(plan_path), f"plan is not valid JSON: {e}") from e
    plan = parse_simulation_plan(doc, base_dir=plan_path.parent)
    report = validate_simulation_plan(plan)
    if has_errors(report):
        first = next(i for i in report if i.severity == ERROR)
        raise ConfigParseError(first.path, first.message)
    return plan
