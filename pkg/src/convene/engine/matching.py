"""Lobby matching: greedy, arrival-ordered, deterministic.

byArrivalOrder slices consecutive groups of targetCohortSize. The
composition strategy buckets waiters by their answer to the configured survey
question and greedily fills each bucket's quota in arrival order; a group is
emitted only when every quota is met exactly. Waiters that cannot belong to
any feasible future group after timeoutSeconds are reported as timed out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from convene.engine.records import ParticipantRecord
from convene.model.types import TransferStageParams


@dataclass
class MatchOutcome:
    groups: list[list[str]] = field(default_factory=list)  # publicIds per new cohort
    timed_out: list[str] = field(default_factory=list)


def _answer_bucket(p: ParticipantRecord, survey_stage_id: str, question_id: str):
    record = p.stageAnswers.get(survey_stage_id)
    if record is None:
        return None
    return record.answers.get(question_id)


def match_lobby(
    waiting: list[ParticipantRecord],
    params: TransferStageParams,
    now: float,
    waiting_since: dict[str, float],
) -> MatchOutcome:
    """`waiting` must be arrival-ordered; the result is a pure function of it."""
    outcome = MatchOutcome()
    ordered = sorted(waiting, key=lambda p: p.arrivalSeq)

    if params.strategy == "byArrivalOrder":
        while len(ordered) >= params.targetCohortSize:
            group = ordered[: params.targetCohortSize]
            ordered = ordered[params.targetCohortSize :]
            outcome.groups.append([p.publicId for p in group])
        for p in ordered:
            if now - waiting_since.get(p.publicId, now) >= params.timeoutSeconds:
                outcome.timed_out.append(p.publicId)
        return outcome

    composition = params.composition
    buckets: dict[object, list[ParticipantRecord]] = {}
    for p in ordered:
        value = _answer_bucket(p, composition.surveyStageId, composition.questionId)
        buckets.setdefault(value, []).append(p)

    required = dict(composition.requiredCounts)
    while all(len(buckets.get(answer, [])) >= count for answer, count in required.items()):
        group: list[str] = []
        for answer, count in required.items():
            taken, buckets[answer] = buckets[answer][:count], buckets[answer][count:]
            group.extend(p.publicId for p in taken)
        # Preserve overall arrival order inside the new cohort.
        order = {p.publicId: p.arrivalSeq for p in ordered}
        group.sort(key=lambda pid: order[pid])
        outcome.groups.append(group)

    # Leftovers: anyone whose bucket quota can never fill from the current
    # lobby is unmatchable; report them once their wait exceeds the timeout.
    for answer, members in buckets.items():
        for p in members:
            if now - waiting_since.get(p.publicId, now) >= params.timeoutSeconds:
                outcome.timed_out.append(p.publicId)
    outcome.timed_out.sort(key=lambda pid: next(p.arrivalSeq for p in ordered if p.publicId == pid))
    return outcome
