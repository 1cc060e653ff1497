"""Election tallying, reveal snapshots, and payout computation.

Elections use pairwise majority: the Condorcet winner when one exists,
otherwise the highest Copeland score (pairwise wins minus losses), with
remaining ties broken by lexicographically smallest candidate id. The rule is
deterministic and permutation-invariant in the ballots, so incremental
recomputation after each ballot equals batch computation.

All money is integer minor units (cents); floats appear only in random-draw
probabilities.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from convene.engine.grading import count_correct
from convene.engine.records import Cohort, ParticipantRecord
from convene.errors import NoBallots, SourceIncomplete, UnresolvedReference
from convene.model.types import (
    ExperimentConfig,
    PayoutStageParams,
    RankingElectionParams,
    RevealStageParams,
    StageConfig,
    StageKind,
    SurveyStageParams,
)


@dataclass(frozen=True)
class Ballot:
    voterPublicId: str
    ranking: tuple[str, ...]  # best first


@dataclass
class ElectionResult:
    winner: str
    method: str = "condorcetCopeland"
    pairwiseMatrix: dict[str, dict[str, int]] = field(default_factory=dict)
    tieBreakApplied: bool = False

    def to_dict(self) -> dict:
        return {
            "winner": self.winner,
            "method": self.method,
            "pairwiseMatrix": {a: dict(row) for a, row in self.pairwiseMatrix.items()},
            "tieBreakApplied": self.tieBreakApplied,
        }


def pairwise_matrix(ballots: list[Ballot], candidates: list[str]) -> dict[str, dict[str, int]]:
    """matrix[a][b] = number of ballots ranking a above b.

    A ballot only counts toward pairs it actually ranks, so self-excluded
    peer ballots (each voter omits themselves) still produce a fair matrix.
    """
    matrix = {a: {b: 0 for b in candidates if b != a} for a in candidates}
    for ballot in ballots:
        position = {cid: i for i, cid in enumerate(ballot.ranking)}
        for a in candidates:
            if a not in position:
                continue
            for b in candidates:
                if b == a or b not in position:
                    continue
                if position[a] < position[b]:
                    matrix[a][b] += 1
    return matrix


def compute_election_winner(ballots: list[Ballot], candidates: list[str]) -> ElectionResult:
    if not ballots or not candidates:
        raise NoBallots("election needs at least one ballot and one candidate")
    matrix = pairwise_matrix(ballots, candidates)

    def beats(a: str, b: str) -> bool:
        return matrix[a][b] > matrix[b][a]

    condorcet = next(
        (a for a in candidates if all(beats(a, b) for b in candidates if b != a)),
        None,
    )
    if condorcet is not None:
        return ElectionResult(winner=condorcet, pairwiseMatrix=matrix)

    def copeland(a: str) -> int:
        wins = sum(1 for b in candidates if b != a and beats(a, b))
        losses = sum(1 for b in candidates if b != a and beats(b, a))
        return wins - losses

    scores = {a: copeland(a) for a in candidates}
    best = max(scores.values())
    leaders = sorted(a for a, s in scores.items() if s == best)
    return ElectionResult(winner=leaders[0], pairwiseMatrix=matrix, tieBreakApplied=True)


def aggregate_item_ranking(ballots: list[Ballot], items: list[str]) -> list[dict]:
    """Item-mode group outcome: items ordered by mean rank (ties by id)."""
    if not ballots:
        raise NoBallots("no rankings submitted")
    totals = {item: 0.0 for item in items}
    counts = {item: 0 for item in items}
    for ballot in ballots:
        for i, item in enumerate(ballot.ranking):
            if item in totals:
                totals[item] += i
                counts[item] += 1
    rows = [
        {"id": item, "meanRank": (totals[item] / counts[item]) if counts[item] else float(len(items))}
        for item in items
    ]
    rows.sort(key=lambda r: (r["meanRank"], r["id"]))
    return rows


# ---------------------------------------------------------------------------
# Reveal snapshots


def _election_source(stage: StageConfig, cohort: Cohort) -> dict:
    election = cohort.elections.get(stage.id)
    params = stage.kindParams
    if election is None or (params.electionEnabled and election.result is None):
        raise SourceIncomplete(stage.id)
    out: dict = {"stageId": stage.id, "kind": "election"}
    if params.electionEnabled and election.result is not None:
        out["winner"] = election.result["winner"]
        out["tieBreakApplied"] = election.result["tieBreakApplied"]
        # Anonymized support counts: how many head-to-head wins each candidate
        # took, never who voted for whom.
        matrix = election.result["pairwiseMatrix"]
        out["tally"] = {
            a: sum(1 for b, votes in row.items() if votes > matrix[b][a]) for a, row in matrix.items()
        }
    if params.mode == "items":
        out["itemRanking"] = aggregate_item_ranking(
            [Ballot(voterPublicId=v, ranking=tuple(r)) for v, r in sorted(election.ballots.items())],
            [item["id"] for item in params.items],
        )
    return out


def _survey_source(
    stage: StageConfig,
    members: list[ParticipantRecord],
) -> dict:
    answered = {p.publicId: p.stageAnswers[stage.id] for p in members if stage.id in p.stageAnswers}
    waiting = [p for p in members if not p.terminal and stage.id not in p.stageAnswers]
    if waiting:
        raise SourceIncomplete(stage.id)
    params = stage.kindParams
    questions = params.questions if isinstance(params, SurveyStageParams) else []
    return {
        "stageId": stage.id,
        "kind": "survey",
        "questions": [
            {
                "id": q.id,
                "prompt": q.prompt,
                "answers": {pid: rec.answers.get(q.id) for pid, rec in sorted(answered.items())},
            }
            for q in questions
        ],
    }


def build_reveal(
    stage: StageConfig,
    config: ExperimentConfig,
    cohort: Cohort,
    members: list[ParticipantRecord],
) -> dict:
    """Freeze the configured sources into one immutable snapshot."""
    params = stage.kindParams
    assert isinstance(params, RevealStageParams)
    sources = []
    for source_id in params.sources:
        source_stage = config.stage_by_id(source_id)
        if source_stage is None:
            raise SourceIncomplete(source_id)
        if source_stage.kind == StageKind.RANKING_ELECTION:
            sources.append(_election_source(source_stage, cohort))
        else:
            sources.append(_survey_source(source_stage, members))
    return {"stageId": stage.id, "sources": sources}


# ---------------------------------------------------------------------------
# Payouts


def _condition_rng(seed: str, cohort_id: str, stage_id: str, public_id: str | None) -> random.Random:
    material = f"{seed}:{cohort_id}:{stage_id}"
    if public_id is not None:
        material = f"{material}:{public_id}"
    return random.Random(material)


def _draw_condition(options: list[dict], rng: random.Random) -> int:
    roll = rng.random()
    cumulative = 0.0
    for option in options:
        cumulative += option["probability"]
        if roll < cumulative:
            return option["amountMinor"]
    return options[-1]["amountMinor"]


def _stage_completed(config: ExperimentConfig, participant: ParticipantRecord, stage_id: str) -> bool:
    index = config.stage_index(stage_id)
    if index is None:
        raise UnresolvedReference(f"payout references unknown stage {stage_id!r}")
    return participant.currentStageIndex > index or stage_id in participant.stageAnswers


def _survey_score(config: ExperimentConfig, participant: ParticipantRecord, stage_id: str | None) -> int:
    if stage_id is None:
        raise UnresolvedReference("payout item missing its survey reference")
    stage = config.stage_by_id(stage_id)
    if stage is None or not isinstance(stage.kindParams, SurveyStageParams):
        raise UnresolvedReference(f"payout references unknown survey {stage_id!r}")
    record = participant.stageAnswers.get(stage_id)
    if record is None:
        return 0
    return count_correct(stage.kindParams, record.answers)


def compute_payout(
    stage: StageConfig,
    config: ExperimentConfig,
    participant: ParticipantRecord,
    cohort: Cohort,
    members: list[ParticipantRecord],
    seed: str,
) -> dict:
    """One participant's payout row. Deterministic given the seed."""
    params = stage.kindParams
    assert isinstance(params, PayoutStageParams)
    base = 0
    bonus = 0
    breakdown = []
    for item in params.items:
        amount = 0
        if item.kind == "fixedCompletion":
            if all(_stage_completed(config, participant, sid) for sid in item.stageIds):
                amount = item.amountMinor
            base += amount
        elif item.kind == "quizPerformance":
            amount = item.amountMinor * _survey_score(config, participant, item.surveyStageId)
            bonus += amount
        elif item.kind == "randomCondition":
            rng = _condition_rng(
                seed,
                cohort.id,
                stage.id,
                participant.publicId if item.scope == "participant" else None,
            )
            amount = _draw_condition(item.options, rng)
            bonus += amount
        elif item.kind == "leaderPerformance":
            election = cohort.elections.get(item.electionStageId or "")
            if election is None or election.result is None:
                raise UnresolvedReference(f"election {item.electionStageId!r} has no result yet")
            leader = next((m for m in members if m.publicId == election.result["winner"]), None)
            if leader is None:
                raise UnresolvedReference(f"elected leader {election.result['winner']!r} not in cohort")
            amount = item.amountMinor * _survey_score(config, leader, item.surveyStageId)
            bonus += amount
        else:
            raise UnresolvedReference(f"unknown payout item kind {item.kind!r}")
        breakdown.append({"kind": item.kind, "amountMinor": amount})

    status = "completed" if participant.status == "completed" else participant.status
    return {
        "publicId": participant.publicId,
        "externalId": participant.externalId,
        "completionStatus": status,
        "basePayMinor": base,
        "bonusMinor": bonus,
        "totalMinor": base + bonus,
        "currencyUnit": params.currencyUnit,
        "items": breakdown,
    }


def payout_sheet(
    stage: StageConfig,
    config: ExperimentConfig,
    cohort: Cohort,
    members: list[ParticipantRecord],
    seed: str,
) -> dict[str, dict]:
    """Rows for every cohort member, keyed by publicId."""
    return {
        p.publicId: compute_payout(stage, config, p, cohort, members, seed)
        for p in sorted(members, key=lambda m: m.publicId)
    }
