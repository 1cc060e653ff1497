"""Prompt assembly from modular plan items.

A prompt is the concatenation of the agent's plan items in order. Every item
renders deterministically from (spec, stage, cohort state), so identical
inputs always produce identical prompt text, which keeps scripted runs
reproducible and call logs meaningful.
"""

from __future__ import annotations

from convene.engine.records import ChatState, Cohort, ParticipantRecord
from convene.errors import MissingStageContext
from convene.model.types import (
    AgentSpec,
    ExperimentConfig,
    PromptItem,
    RankingElectionParams,
    StageConfig,
    StageKind,
    SurveyStageParams,
)

PSEUDONYM_GUARD_TEXT = (
    "Participants appear under assigned pseudonyms. Treat every display name "
    "as an opaque label: ignore name-related semantics and do not infer "
    "gender, personality, expertise, or preferences from any name."
)

SYSTEM_INSTRUCTIONS_TEXT = (
    "You are taking part in a group study session. Follow the current stage's "
    "instructions. Always answer with a single JSON object containing the "
    "fields listed below; put any free-text reply in the \"response\" field."
)


def default_prompt_plan() -> list[PromptItem]:
    return [
        PromptItem(kind="profileBlock"),
        PromptItem(kind="systemInstructions"),
        PromptItem(kind="pseudonymGuard"),
        PromptItem(kind="chatHistory"),
    ]


def render_chat_history(chat: ChatState | None) -> str:
    lines = ["Conversation so far:"]
    if chat is not None:
        for message in chat.messages:
            lines.append(f"[{message.deliveredAt:.1f}] {message.displayName}: {message.text}")
    return "\n".join(lines)


def _render_schema(spec: AgentSpec) -> str:
    lines = ["Output JSON fields:"]
    for field in spec.structuredOutputSchema:
        description = f" — {field.description}" if field.description else ""
        lines.append(f"- {field.fieldName} ({field.fieldType}){description}")
    return "\n".join(lines)


def _render_profile_block(spec: AgentSpec, persona_override: str | None) -> str:
    lines = [f"You are {spec.profile.get('displayName', 'Agent')} {spec.profile.get('avatar', '')}".rstrip() + "."]
    persona = persona_override if persona_override is not None else spec.personaPrompt
    if persona:
        lines.append(persona)
    return "\n".join(lines)


def _render_stage_context(
    config: ExperimentConfig,
    stage_id: str,
    cohort: Cohort,
    members: list[ParticipantRecord],
) -> str:
    stage = config.stage_by_id(stage_id)
    if stage is None:
        raise MissingStageContext(stage_id)
    lines = [f"Stage '{stage.title}':"]
    if stage.markdownBody:
        lines.append(stage.markdownBody)
    params = stage.kindParams
    if isinstance(params, SurveyStageParams):
        answered = [m for m in members if stage_id in m.stageAnswers]
        if not answered:
            raise MissingStageContext(stage_id)
        for question in params.questions:
            lines.append(f"Question {question.id}: {question.prompt}")
            for member in answered:
                value = member.stageAnswers[stage_id].answers.get(question.id)
                if value is not None:
                    lines.append(f"  {member.profile.displayName} ({member.publicId}): {value}")
    elif isinstance(params, RankingElectionParams):
        election = cohort.elections.get(stage_id)
        if election is None or election.result is None:
            raise MissingStageContext(stage_id)
        if "winner" in election.result:
            lines.append(f"Election winner: {election.result['winner']}")
        if "itemRanking" in election.result:
            order = ", ".join(r["id"] for r in election.result["itemRanking"])
            lines.append(f"Group item ranking: {order}")
    elif stage.kind == StageKind.REVEAL:
        snapshot = cohort.reveals.get(stage_id)
        if snapshot is None:
            raise MissingStageContext(stage_id)
        lines.append(f"Reveal data: {snapshot}")
    return "\n".join(lines)


def _render_current_stage(stage: StageConfig, members: list[ParticipantRecord], spec: AgentSpec) -> str:
    lines = [f"Current stage '{stage.title}' ({stage.kind})."]
    if stage.markdownBody:
        lines.append(stage.markdownBody)
    params = stage.kindParams
    if isinstance(params, SurveyStageParams):
        lines.append("Answer every question; reply with an \"answers\" object keyed by question id.")
        for question in params.questions:
            lines.append(f"Question {question.id} ({question.kind}): {question.prompt}")
            if question.options:
                lines.append("  Options: " + ", ".join(o["id"] for o in question.options))
            if question.scaleBounds is not None:
                lines.append(f"  Scale: {question.scaleBounds.min}..{question.scaleBounds.max}")
    elif isinstance(params, RankingElectionParams):
        if params.mode == "items":
            ids = [item["id"] for item in params.items]
        else:
            ids = [
                m.publicId
                for m in members
                if m.status != "booted" and (params.selfVoteAllowed or not _is_self(m, spec))
            ]
        lines.append(
            "Rank the following ids from best to worst; reply with a \"ranking\" "
            "array that is a complete permutation: " + ", ".join(sorted(ids))
        )
    return "\n".join(lines)


def _is_self(member: ParticipantRecord, spec: AgentSpec) -> bool:
    return member.agentTemplateId == spec.id


def assemble_prompt(
    spec: AgentSpec,
    config: ExperimentConfig,
    stage: StageConfig,
    cohort: Cohort,
    members: list[ParticipantRecord],
    chat: ChatState | None,
    persona_override: str | None = None,
) -> str:
    """Concatenate the plan items; falls back to the default plan when the
    spec does not define one."""
    plan = spec.promptPlan if spec.promptPlan else default_prompt_plan()
    parts: list[str] = []
    for item in plan:
        if item.kind == "profileBlock":
            parts.append(_render_profile_block(spec, persona_override))
        elif item.kind == "systemInstructions":
            parts.append(SYSTEM_INSTRUCTIONS_TEXT)
            parts.append(_render_schema(spec))
        elif item.kind == "pseudonymGuard":
            parts.append(PSEUDONYM_GUARD_TEXT)
        elif item.kind == "customText":
            parts.append(item.text or "")
        elif item.kind == "stageContextRef":
            parts.append(_render_stage_context(config, item.stageId or "", cohort, members))
        elif item.kind == "chatHistory":
            parts.append(render_chat_history(chat))
    parts.append(_render_current_stage(stage, members, spec))
    return "\n\n".join(part for part in parts if part)
