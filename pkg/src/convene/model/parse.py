"""Canonical config document: parse, serialize, canonicalize.

The on-disk format is UTF-8 JSON. Canonical form sorts object keys, uses
compact separators, and keeps numbers in Python's shortest round-trip
representation, so re-serializing a parsed document is byte-stable and
structural equality implies byte equality.
"""

from __future__ import annotations

import json

from convene.errors import ConfigParseError
from convene.model.types import (
    AgentModelConfig,
    AgentSpec,
    ChatStageParams,
    ExperimentConfig,
    ExperimentMetadata,
    PARAMS_BY_KIND,
    PayoutItem,
    PayoutStageParams,
    ProfileStageParams,
    PromptItem,
    RankingElectionParams,
    ResponseGate,
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
)


def canonical_dumps(obj) -> str:
    """Deterministic JSON text for any JSON-compatible value."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def canonical_bytes(obj) -> bytes:
    return (canonical_dumps(obj) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# Structural helpers. Each extractor raises ConfigParseError with the path of
# the offending field so the CLI can point straight at it.


_MISSING = object()


def _expect(d, path: str, typ, what: str):
    if not isinstance(d, typ):
        raise ConfigParseError(path, f"expected {what}")
    return d


def _get(d: dict, path: str, key: str, typ, what: str, default=_MISSING):
    if key not in d:
        if default is _MISSING:
            raise ConfigParseError(f"{path}.{key}", "missing required field")
        return default
    return _expect(d[key], f"{path}.{key}", typ, what)


def _opt_str(d: dict, path: str, key: str) -> str | None:
    v = d.get(key)
    if v is None:
        return None
    return _expect(v, f"{path}.{key}", str, "string or null")


def _opt_int(d: dict, path: str, key: str) -> int | None:
    v = d.get(key)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigParseError(f"{path}.{key}", "expected integer or null")
    return v


def _int(d: dict, path: str, key: str, default=_MISSING) -> int:
    v = _get(d, path, key, int, "integer", default)
    if isinstance(v, bool):
        raise ConfigParseError(f"{path}.{key}", "expected integer")
    return v


def _number(v, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigParseError(path, "expected number")
    return float(v)


# ---------------------------------------------------------------------------
# Parsing


def _parse_questions(raw, path: str) -> list[SurveyQuestion]:
    _expect(raw, path, list, "array of questions")
    out = []
    for i, q in enumerate(raw):
        qp = f"{path}[{i}]"
        _expect(q, qp, dict, "question object")
        kind = _get(q, qp, "kind", str, "string")
        if kind not in SurveyQuestion.KINDS:
            raise ConfigParseError(f"{qp}.kind", f"unknown question kind {kind!r}")
        bounds = None
        if q.get("scaleBounds") is not None:
            b = _expect(q["scaleBounds"], f"{qp}.scaleBounds", dict, "object")
            bounds = ScaleBounds(
                min=_int(b, f"{qp}.scaleBounds", "min"),
                max=_int(b, f"{qp}.scaleBounds", "max"),
                minLabel=_opt_str(b, f"{qp}.scaleBounds", "minLabel"),
                maxLabel=_opt_str(b, f"{qp}.scaleBounds", "maxLabel"),
            )
        options = q.get("options", [])
        _expect(options, f"{qp}.options", list, "array")
        for j, opt in enumerate(options):
            _expect(opt, f"{qp}.options[{j}]", dict, "option object")
            _get(opt, f"{qp}.options[{j}]", "id", str, "string")
            _get(opt, f"{qp}.options[{j}]", "text", str, "string")
        out.append(
            SurveyQuestion(
                id=_get(q, qp, "id", str, "string"),
                kind=kind,
                prompt=_get(q, qp, "prompt", str, "string"),
                options=[{"id": o["id"], "text": o["text"]} for o in options],
                scaleBounds=bounds,
                correctAnswer=q.get("correctAnswer"),
            )
        )
    return out


def _parse_kind_params(kind: str, raw, path: str):
    cls = PARAMS_BY_KIND.get(kind)
    if cls is None:
        return None
    raw = raw if raw is not None else {}
    _expect(raw, path, dict, "params object")
    if cls is ProfileStageParams:
        return ProfileStageParams(
            mode=_get(raw, path, "mode", str, "string", "selfChosen"),
            pseudonymSet=_opt_str(raw, path, "pseudonymSet"),
        )
    if cls is SurveyStageParams:
        return SurveyStageParams(
            questions=_parse_questions(raw.get("questions", []), f"{path}.questions"),
            perParticipant=_get(raw, path, "perParticipant", bool, "bool", False),
            excludeSelf=_get(raw, path, "excludeSelf", bool, "bool", False),
        )
    if cls is ChatStageParams:
        quorum = raw.get("endChatQuorum", "all")
        if not (quorum == "all" or (isinstance(quorum, int) and not isinstance(quorum, bool))):
            raise ConfigParseError(f"{path}.endChatQuorum", 'expected "all" or integer')
        mediators = _get(raw, path, "mediatorAgentIds", list, "array", [])
        return ChatStageParams(
            mediatorAgentIds=[_expect(m, f"{path}.mediatorAgentIds[{i}]", str, "string") for i, m in enumerate(mediators)],
            requireEndChatConsensus=_get(raw, path, "requireEndChatConsensus", bool, "bool", False),
            endChatQuorum=quorum,
            disableWpmThrottle=_get(raw, path, "disableWpmThrottle", bool, "bool", False),
            selection=_get(raw, path, "selection", str, "string", "wpmWeighted"),
        )
    if cls is TransferStageParams:
        comp = None
        if raw.get("composition") is not None:
            c = _expect(raw["composition"], f"{path}.composition", dict, "object")
            counts = _get(c, f"{path}.composition", "requiredCounts", dict, "object")
            parsed_counts = {}
            for k, v in counts.items():
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ConfigParseError(f"{path}.composition.requiredCounts.{k}", "expected integer")
                parsed_counts[k] = v
            comp = TransferComposition(
                surveyStageId=_get(c, f"{path}.composition", "surveyStageId", str, "string"),
                questionId=_get(c, f"{path}.composition", "questionId", str, "string"),
                requiredCounts=parsed_counts,
            )
        return TransferStageParams(
            strategy=_get(raw, path, "strategy", str, "string", "byArrivalOrder"),
            targetCohortSize=_int(raw, path, "targetCohortSize"),
            composition=comp,
            timeoutSeconds=_int(raw, path, "timeoutSeconds", 600),
        )
    if cls is RankingElectionParams:
        items = _get(raw, path, "items", list, "array", [])
        for j, it in enumerate(items):
            _expect(it, f"{path}.items[{j}]", dict, "item object")
            _get(it, f"{path}.items[{j}]", "id", str, "string")
            _get(it, f"{path}.items[{j}]", "text", str, "string")
        return RankingElectionParams(
            mode=_get(raw, path, "mode", str, "string", "peers"),
            items=[{"id": it["id"], "text": it["text"]} for it in items],
            selfVoteAllowed=_get(raw, path, "selfVoteAllowed", bool, "bool", False),
            electionEnabled=_get(raw, path, "electionEnabled", bool, "bool", True),
        )
    if cls is RevealStageParams:
        sources = _get(raw, path, "sources", list, "array", [])
        return RevealStageParams(
            sources=[_expect(s, f"{path}.sources[{i}]", str, "string") for i, s in enumerate(sources)]
        )
    if cls is PayoutStageParams:
        items_raw = _get(raw, path, "items", list, "array", [])
        items = []
        for i, it in enumerate(items_raw):
            ip = f"{path}.items[{i}]"
            _expect(it, ip, dict, "payout item object")
            kind = _get(it, ip, "kind", str, "string")
            if kind not in PayoutItem.KINDS:
                raise ConfigParseError(f"{ip}.kind", f"unknown payout item kind {kind!r}")
            options = _get(it, ip, "options", list, "array", [])
            for j, opt in enumerate(options):
                _expect(opt, f"{ip}.options[{j}]", dict, "object")
                _int(opt, f"{ip}.options[{j}]", "amountMinor")
                _number(opt.get("probability"), f"{ip}.options[{j}].probability")
            items.append(
                PayoutItem(
                    kind=kind,
                    amountMinor=_int(it, ip, "amountMinor", 0),
                    stageIds=list(_get(it, ip, "stageIds", list, "array", [])),
                    surveyStageId=_opt_str(it, ip, "surveyStageId"),
                    electionStageId=_opt_str(it, ip, "electionStageId"),
                    options=[{"amountMinor": o["amountMinor"], "probability": float(o["probability"])} for o in options],
                    scope=_get(it, ip, "scope", str, "string", "cohort"),
                )
            )
        return PayoutStageParams(
            currencyUnit=_get(raw, path, "currencyUnit", str, "string", "USD"),
            items=items,
        )
    if cls is RoleAssignmentParams:
        roles_raw = _get(raw, path, "roles", list, "array", [])
        roles = []
        for i, r in enumerate(roles_raw):
            rp = f"{path}.roles[{i}]"
            _expect(r, rp, dict, "role object")
            roles.append(
                RoleDef(
                    roleId=_get(r, rp, "roleId", str, "string"),
                    name=_get(r, rp, "name", str, "string"),
                    markdownBody=_get(r, rp, "markdownBody", str, "string", ""),
                )
            )
        return RoleAssignmentParams(roles=roles)
    raise ConfigParseError(path, f"unhandled params class {cls}")


def _parse_stage(raw, path: str) -> StageConfig:
    _expect(raw, path, dict, "stage object")
    kind = _get(raw, path, "kind", str, "string")
    if kind not in StageKind.ALL:
        raise ConfigParseError(f"{path}.kind", f"unknown stage kind {kind!r}")
    ui_raw = raw.get("ui", {})
    _expect(ui_raw, f"{path}.ui", dict, "object")
    ui = StageUi(
        showProgressBar=_get(ui_raw, f"{path}.ui", "showProgressBar", bool, "bool", True),
        waitForAllParticipants=_get(ui_raw, f"{path}.ui", "waitForAllParticipants", bool, "bool", False),
        autoAdvanceTimerSeconds=_opt_int(ui_raw, f"{path}.ui", "autoAdvanceTimerSeconds"),
    )
    return StageConfig(
        id=_get(raw, path, "id", str, "string"),
        kind=kind,
        title=_get(raw, path, "title", str, "string"),
        markdownBody=_get(raw, path, "markdownBody", str, "string", ""),
        ui=ui,
        kindParams=_parse_kind_params(kind, raw.get("kindParams"), f"{path}.kindParams"),
    )


def _parse_prompt_item(raw, path: str) -> PromptItem:
    _expect(raw, path, dict, "prompt item object")
    kind = _get(raw, path, "kind", str, "string")
    if kind not in PromptItem.KINDS:
        raise ConfigParseError(f"{path}.kind", f"unknown prompt item kind {kind!r}")
    item = PromptItem(kind=kind, text=_opt_str(raw, path, "text"), stageId=_opt_str(raw, path, "stageId"))
    if kind == "customText" and item.text is None:
        raise ConfigParseError(f"{path}.text", "customText requires text")
    if kind == "stageContextRef" and item.stageId is None:
        raise ConfigParseError(f"{path}.stageId", "stageContextRef requires stageId")
    return item


def _parse_agent(raw, path: str) -> AgentSpec:
    _expect(raw, path, dict, "agent object")
    role = _get(raw, path, "role", str, "string")
    if role not in ("participant", "mediator"):
        raise ConfigParseError(f"{path}.role", f"unknown agent role {role!r}")
    profile = _get(raw, path, "profile", dict, "object", {})
    model_raw = raw.get("model", {})
    _expect(model_raw, f"{path}.model", dict, "object")
    sp_raw = model_raw.get("samplingParams", {})
    _expect(sp_raw, f"{path}.model.samplingParams", dict, "object")
    schema_raw = _get(raw, path, "structuredOutputSchema", list, "array", [])
    schema = []
    for i, f in enumerate(schema_raw):
        fp = f"{path}.structuredOutputSchema[{i}]"
        _expect(f, fp, dict, "field object")
        ftype = _get(f, fp, "fieldType", str, "string")
        if ftype not in ("bool", "int", "real", "text"):
            raise ConfigParseError(f"{fp}.fieldType", f"unknown field type {ftype!r}")
        schema.append(
            StructuredField(
                fieldName=_get(f, fp, "fieldName", str, "string"),
                fieldType=ftype,
                description=_get(f, fp, "description", str, "string", ""),
            )
        )
    gate = None
    if raw.get("responseGate") is not None:
        g = _expect(raw["responseGate"], f"{path}.responseGate", dict, "object")
        gate = ResponseGate(
            fieldName=_get(g, f"{path}.responseGate", "fieldName", str, "string"),
            threshold=_number(g.get("threshold"), f"{path}.responseGate.threshold"),
        )
    plan_raw = _get(raw, path, "promptPlan", list, "array", [])
    spec = AgentSpec(
        id=_get(raw, path, "id", str, "string"),
        role=role,
        profile={"displayName": profile.get("displayName", "Agent"), "avatar": profile.get("avatar", "🤖")},
        personaPrompt=_opt_str(raw, path, "personaPrompt"),
        promptPlan=[_parse_prompt_item(p, f"{path}.promptPlan[{i}]") for i, p in enumerate(plan_raw)],
        model=AgentModelConfig(
            providerId=_get(model_raw, f"{path}.model", "providerId", str, "string", "scripted"),
            modelName=_get(model_raw, f"{path}.model", "modelName", str, "string", "default"),
            samplingParams=SamplingParams(
                temperature=_number(sp_raw.get("temperature", 0.7), f"{path}.model.samplingParams.temperature"),
                maxOutputTokens=_int(sp_raw, f"{path}.model.samplingParams", "maxOutputTokens", 1024),
            ),
        ),
        wpm=_number(raw.get("wpm", 60.0), f"{path}.wpm"),
        structuredOutputSchema=schema,
        responseGate=gate,
    )
    return spec.normalized()


def parse_experiment_config(doc: str | bytes | dict) -> ExperimentConfig:
    """Parse a config document; raise ConfigParseError on structural problems."""
    if isinstance(doc, (str, bytes)):
        try:
            raw = json.loads(doc)
        except json.JSONDecodeError as e:
            raise ConfigParseError("$", f"invalid JSON: {e}") from e
    else:
        raw = doc
    _expect(raw, "$", dict, "top-level object")
    meta_raw = _get(raw, "$", "metadata", dict, "object")
    metadata = ExperimentMetadata(
        name=_get(meta_raw, "metadata", "name", str, "string"),
        description=_get(meta_raw, "metadata", "description", str, "string", ""),
        publicVisibility=_get(meta_raw, "metadata", "publicVisibility", bool, "bool", False),
        prolificRedirectUrl=_opt_str(meta_raw, "metadata", "prolificRedirectUrl"),
        prolificCompletionCode=_opt_str(meta_raw, "metadata", "prolificCompletionCode"),
        template=_get(meta_raw, "metadata", "template", bool, "bool", False),
    )
    stages_raw = _get(raw, "$", "stages", list, "array")
    stages = [_parse_stage(s, f"stages[{i}]") for i, s in enumerate(stages_raw)]
    agents_raw = _get(raw, "$", "agentTemplates", list, "array", [])
    agents = [_parse_agent(a, f"agentTemplates[{i}]") for i, a in enumerate(agents_raw)]
    roles_raw = _get(raw, "$", "roles", dict, "object", {})
    roles = {}
    for identity, role in roles_raw.items():
        if role not in ("creator", "editor", "reader"):
            raise ConfigParseError(f"roles.{identity}", f"unknown role {role!r}")
        roles[identity] = role
    settings_raw = raw.get("settings", {})
    _expect(settings_raw, "settings", dict, "object")
    settings = RuntimeSettings(
        heartbeatIntervalSeconds=_int(settings_raw, "settings", "heartbeatIntervalSeconds", 15),
        missedHeartbeatsForDisconnect=_int(settings_raw, "settings", "missedHeartbeatsForDisconnect", 2),
        idleThresholdSeconds=_int(settings_raw, "settings", "idleThresholdSeconds", 60),
        transferOfferExpirySeconds=_int(settings_raw, "settings", "transferOfferExpirySeconds", 120),
        lobbyMatchTickSeconds=_int(settings_raw, "settings", "lobbyMatchTickSeconds", 5),
    )
    return ExperimentConfig(
        id=_get(raw, "$", "id", str, "string"),
        metadata=metadata,
        stages=stages,
        agentTemplates=agents,
        roles=roles,
        settings=settings,
    )


# ---------------------------------------------------------------------------
# Serialization


def _ui_to_dict(ui: StageUi) -> dict:
    return {
        "showProgressBar": ui.showProgressBar,
        "waitForAllParticipants": ui.waitForAllParticipants,
        "autoAdvanceTimerSeconds": ui.autoAdvanceTimerSeconds,
    }


def _question_to_dict(q: SurveyQuestion) -> dict:
    d = {
        "id": q.id,
        "kind": q.kind,
        "prompt": q.prompt,
        "options": [{"id": o["id"], "text": o["text"]} for o in q.options],
        "scaleBounds": None,
        "correctAnswer": q.correctAnswer,
    }
    if q.scaleBounds is not None:
        d["scaleBounds"] = {
            "min": q.scaleBounds.min,
            "max": q.scaleBounds.max,
            "minLabel": q.scaleBounds.minLabel,
            "maxLabel": q.scaleBounds.maxLabel,
        }
    return d


def _params_to_dict(stage: StageConfig):
    p = stage.kindParams
    if p is None:
        return None
    if isinstance(p, ProfileStageParams):
        return {"mode": p.mode, "pseudonymSet": p.pseudonymSet}
    if isinstance(p, SurveyStageParams):
        return {
            "questions": [_question_to_dict(q) for q in p.questions],
            "perParticipant": p.perParticipant,
            "excludeSelf": p.excludeSelf,
        }
    if isinstance(p, ChatStageParams):
        return {
            "mediatorAgentIds": list(p.mediatorAgentIds),
            "requireEndChatConsensus": p.requireEndChatConsensus,
            "endChatQuorum": p.endChatQuorum,
            "disableWpmThrottle": p.disableWpmThrottle,
            "selection": p.selection,
        }
    if isinstance(p, TransferStageParams):
        comp = None
        if p.composition is not None:
            comp = {
                "surveyStageId": p.composition.surveyStageId,
                "questionId": p.composition.questionId,
                "requiredCounts": dict(p.composition.requiredCounts),
            }
        return {
            "strategy": p.strategy,
            "targetCohortSize": p.targetCohortSize,
            "composition": comp,
            "timeoutSeconds": p.timeoutSeconds,
        }
    if isinstance(p, RankingElectionParams):
        return {
            "mode": p.mode,
            "items": [{"id": it["id"], "text": it["text"]} for it in p.items],
            "selfVoteAllowed": p.selfVoteAllowed,
            "electionEnabled": p.electionEnabled,
        }
    if isinstance(p, RevealStageParams):
        return {"sources": list(p.sources)}
    if isinstance(p, PayoutStageParams):
        return {
            "currencyUnit": p.currencyUnit,
            "items": [
                {
                    "kind": it.kind,
                    "amountMinor": it.amountMinor,
                    "stageIds": list(it.stageIds),
                    "surveyStageId": it.surveyStageId,
                    "electionStageId": it.electionStageId,
                    "options": [{"amountMinor": o["amountMinor"], "probability": o["probability"]} for o in it.options],
                    "scope": it.scope,
                }
                for it in p.items
            ],
        }
    if isinstance(p, RoleAssignmentParams):
        return {"roles": [{"roleId": r.roleId, "name": r.name, "markdownBody": r.markdownBody} for r in p.roles]}
    raise TypeError(f"unknown params type {type(p)}")


def _prompt_item_to_dict(item: PromptItem) -> dict:
    d = {"kind": item.kind}
    if item.text is not None:
        d["text"] = item.text
    if item.stageId is not None:
        d["stageId"] = item.stageId
    return d


def agent_spec_to_dict(a: AgentSpec) -> dict:
    return {
        "id": a.id,
        "role": a.role,
        "profile": {"displayName": a.profile.get("displayName", "Agent"), "avatar": a.profile.get("avatar", "🤖")},
        "personaPrompt": a.personaPrompt,
        "promptPlan": [_prompt_item_to_dict(p) for p in a.promptPlan],
        "model": {
            "providerId": a.model.providerId,
            "modelName": a.model.modelName,
            "samplingParams": {
                "temperature": a.model.samplingParams.temperature,
                "maxOutputTokens": a.model.samplingParams.maxOutputTokens,
            },
        },
        "wpm": a.wpm,
        "structuredOutputSchema": [
            {"fieldName": f.fieldName, "fieldType": f.fieldType, "description": f.description}
            for f in a.structuredOutputSchema
        ],
        "responseGate": (
            None
            if a.responseGate is None
            else {"fieldName": a.responseGate.fieldName, "threshold": a.responseGate.threshold}
        ),
    }


def stage_to_dict(stage: StageConfig) -> dict:
    return {
        "id": stage.id,
        "kind": stage.kind,
        "title": stage.title,
        "markdownBody": stage.markdownBody,
        "ui": _ui_to_dict(stage.ui),
        "kindParams": _params_to_dict(stage),
    }


def experiment_config_to_dict(config: ExperimentConfig) -> dict:
    return {
        "id": config.id,
        "metadata": {
            "name": config.metadata.name,
            "description": config.metadata.description,
            "publicVisibility": config.metadata.publicVisibility,
            "prolificRedirectUrl": config.metadata.prolificRedirectUrl,
            "prolificCompletionCode": config.metadata.prolificCompletionCode,
            "template": config.metadata.template,
        },
        "stages": [stage_to_dict(s) for s in config.stages],
        "agentTemplates": [agent_spec_to_dict(a) for a in config.agentTemplates],
        "roles": dict(config.roles),
        "settings": {
            "heartbeatIntervalSeconds": config.settings.heartbeatIntervalSeconds,
            "missedHeartbeatsForDisconnect": config.settings.missedHeartbeatsForDisconnect,
            "idleThresholdSeconds": config.settings.idleThresholdSeconds,
            "transferOfferExpirySeconds": config.settings.transferOfferExpirySeconds,
            "lobbyMatchTickSeconds": config.settings.lobbyMatchTickSeconds,
        },
    }


def canonicalize(config: ExperimentConfig) -> bytes:
    """Deterministic byte serialization of a config."""
    return canonical_bytes(experiment_config_to_dict(config))
