"""Export surface: zip archive, per-stage CSVs, payout CSV.

Archives are reproducible byte-for-byte: entry timestamps are pinned, entry
order is sorted, CSVs derive from state alone, and the event log is already
canonical text. Two exports with no intervening events produce identical
bytes, which the acceptance suite checks directly.
"""

from __future__ import annotations

import csv
import io
import json
import zipfile

from convene.engine.state import ExperimentState
from convene.errors import NoPayoutStage
from convene.model.parse import canonical_bytes, experiment_config_to_dict
from convene.model.types import StageKind
from convene.store.events import EventRecord

# Fixed DOS timestamp for every archive member (zip cannot omit one).
ARCHIVE_ENTRY_TIME = (1980, 1, 1, 0, 0, 0)

CHAT_CSV_COLUMNS = ["timestamp", "cohortId", "stageId", "publicId", "displayName", "message"]
PAYOUT_CSV_COLUMNS = ["externalId", "completionStatus", "bonus", "idKind"]
SURVEY_CSV_COLUMNS = ["cohortId", "stageId", "publicId", "questionId", "answer", "timedOut"]
PARTICIPANT_CSV_COLUMNS = [
    "publicId",
    "displayName",
    "avatar",
    "pronouns",
    "externalId",
    "status",
    "cohortId",
    "currentStageIndex",
    "roleId",
    "isAgent",
]


def _csv_text(columns: list[str], rows: list[list]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\r\n")
    writer.writerow(columns)
    writer.writerows(rows)
    return buffer.getvalue()


def _format_minor(amount_minor: int) -> str:
    sign = "-" if amount_minor < 0 else ""
    amount_minor = abs(amount_minor)
    return f"{sign}{amount_minor // 100}.{amount_minor % 100:02d}"


def chat_csv(state: ExperimentState, cohort_id: str) -> str:
    cohort = state.cohorts[cohort_id]
    rows = []
    for stage in state.config.stages:
        chat = cohort.chat.get(stage.id)
        if chat is None:
            continue
        for message in sorted(chat.messages, key=lambda m: (m.deliveredAt, m.messageId)):
            rows.append(
                [
                    f"{message.deliveredAt:.3f}",
                    cohort_id,
                    stage.id,
                    message.senderPublicId,
                    message.displayName,
                    message.text,
                ]
            )
    return _csv_text(CHAT_CSV_COLUMNS, rows)


def surveys_csv(state: ExperimentState) -> str:
    rows = []
    answer_kinds = (StageKind.SURVEY, StageKind.SURVEY_PER_PARTICIPANT, StageKind.COMPREHENSION)
    survey_stage_ids = [s.id for s in state.config.stages if s.kind in answer_kinds]
    for public_id in sorted(state.participants):
        record = state.participants[public_id]
        for stage_id in survey_stage_ids:
            answer = record.stageAnswers.get(stage_id)
            if answer is None:
                continue
            for question_id in sorted(answer.answers):
                value = answer.answers[question_id]
                rows.append(
                    [
                        record.cohortId,
                        stage_id,
                        public_id,
                        question_id,
                        value if isinstance(value, str) else json.dumps(value, sort_keys=True),
                        "true" if answer.timedOut else "false",
                    ]
                )
    return _csv_text(SURVEY_CSV_COLUMNS, rows)


def participants_csv(state: ExperimentState) -> str:
    rows = []
    for public_id in sorted(state.participants):
        p = state.participants[public_id]
        rows.append(
            [
                p.publicId,
                p.profile.displayName,
                p.profile.avatar,
                p.profile.pronouns,
                p.externalId or "",
                p.status,
                p.cohortId,
                p.currentStageIndex,
                p.roleId or "",
                "true" if p.isAgent else "false",
            ]
        )
    return _csv_text(PARTICIPANT_CSV_COLUMNS, rows)


def export_payout_csv(state: ExperimentState) -> str:
    """One row per participant that entered; amounts carry two decimals.

    The bonus column is the participant's total computed payout. Participants
    whose cohort never reached a payout stage earn 0.00.
    """
    if not any(s.kind == StageKind.PAYOUT for s in state.config.stages):
        raise NoPayoutStage("config has no payout stage")
    totals: dict[str, int] = {}
    for cohort in state.cohorts.values():
        for rows in cohort.payouts.values():
            for public_id, row in rows.items():
                totals[public_id] = totals.get(public_id, 0) + row["totalMinor"]
    out = []
    for public_id in sorted(state.participants):
        p = state.participants[public_id]
        if p.isAgent:
            continue
        external = p.externalId
        out.append(
            [
                external if external else p.publicId,
                p.status,
                _format_minor(totals.get(public_id, 0)),
                "external" if external else "public",
            ]
        )
    return _csv_text(PAYOUT_CSV_COLUMNS, out)


def stats_doc(state: ExperimentState) -> dict:
    by_status: dict[str, int] = {}
    for p in state.participants.values():
        by_status[p.status] = by_status.get(p.status, 0) + 1
    return {
        "attentionChecks": dict(state.attentionStats),
        "participantsByStatus": by_status,
        "cohortCount": len(state.cohorts),
        "alertCount": len(state.alerts),
    }


def build_archive(
    state: ExperimentState,
    events: list[EventRecord],
) -> bytes:
    """The full .zip: canonical config, event log, and every CSV."""
    entries: dict[str, bytes] = {
        "config.json": canonical_bytes(experiment_config_to_dict(state.config)),
        "events.jsonl": ("".join(e.canonical_line() + "\n" for e in events)).encode("utf-8"),
        "surveys.csv": surveys_csv(state).encode("utf-8"),
        "participants.csv": participants_csv(state).encode("utf-8"),
        "stats.json": canonical_bytes(stats_doc(state)),
    }
    try:
        entries["payouts.csv"] = export_payout_csv(state).encode("utf-8")
    except NoPayoutStage:
        pass
    for cohort_id in sorted(state.cohorts):
        entries[f"chats/{cohort_id}.csv"] = chat_csv(state, cohort_id).encode("utf-8")

    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w", compression=zipfile.ZIP_DEFLATED) as archive:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=ARCHIVE_ENTRY_TIME)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            archive.writestr(info, entries[name])
    return buffer.getvalue()
