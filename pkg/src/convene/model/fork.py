"""Forking: deep-copy a config under a new owner with fresh ids."""

from __future__ import annotations

from convene.errors import PermissionDenied
from convene.ids import IdSource
from convene.model.parse import experiment_config_to_dict, parse_experiment_config
from convene.model.types import ExperimentConfig


def fork_experiment(
    source: ExperimentConfig,
    new_owner: str,
    id_source: IdSource | None = None,
) -> ExperimentConfig:
    """Copy `source` for `new_owner`, rewriting every internal id.

    Allowed when the source is publicly visible or the new owner already
    holds any role on it. The copy shares no mutable state with the source.
    """
    if not source.metadata.publicVisibility and new_owner not in source.roles:
        raise PermissionDenied(f"{new_owner!r} may not fork experiment {source.id!r}")
    ids = id_source if id_source is not None else IdSource()

    # Round-trip through the document form: cheap deep copy that can only
    # contain serializable state, so the fork cannot alias the source.
    doc = experiment_config_to_dict(source)
    doc["id"] = ids.short_id("x")
    doc["metadata"]["name"] = f"{source.metadata.name} (copy)"
    doc["metadata"]["template"] = False
    doc["roles"] = {new_owner: "creator"}

    stage_map = {s["id"]: ids.short_id("s") for s in doc["stages"]}
    agent_map = {a["id"]: ids.short_id("a") for a in doc["agentTemplates"]}

    def stage_ref(old: str) -> str:
        return stage_map.get(old, old)

    for stage in doc["stages"]:
        stage["id"] = stage_map[stage["id"]]
        params = stage["kindParams"]
        if not params:
            continue
        if "sources" in params:
            params["sources"] = [stage_ref(s) for s in params["sources"]]
        if params.get("composition"):
            params["composition"]["surveyStageId"] = stage_ref(params["composition"]["surveyStageId"])
        if "mediatorAgentIds" in params:
            params["mediatorAgentIds"] = [agent_map.get(a, a) for a in params["mediatorAgentIds"]]
        for item in params.get("items", []):
            if not isinstance(item, dict) or "kind" not in item:
                continue  # ranking items reuse the "items" key but carry no refs
            item["stageIds"] = [stage_ref(s) for s in item.get("stageIds", [])]
            if item.get("surveyStageId"):
                item["surveyStageId"] = stage_ref(item["surveyStageId"])
            if item.get("electionStageId"):
                item["electionStageId"] = stage_ref(item["electionStageId"])

    for agent in doc["agentTemplates"]:
        agent["id"] = agent_map[agent["id"]]
        for item in agent["promptPlan"]:
            if item.get("stageId"):
                item["stageId"] = stage_ref(item["stageId"])

    return parse_experiment_config(doc)
