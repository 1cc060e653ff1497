"""Append-only event streams with per-stream gapless sequences.

Streams are keyed by cohort id, plus one reserved stream per experiment
(`EXPERIMENT_STREAM`) for experiment-scoped records. A store-wide
`globalSeq` gives replay a total order across streams.

Events are the source of truth: they carry public ids only. The private half
of an id pair never enters a stream (see store.identity), which is what makes
exports privacy-safe by construction rather than by scrubbing.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from convene.errors import StorageFailure
from convene.model.parse import canonical_dumps

EXPERIMENT_STREAM = "exp"

SYSTEM_ACTOR = "system"


@dataclass(frozen=True)
class EventRecord:
    streamId: str
    sequence: int  # gapless per stream, starts at 1
    globalSeq: int  # total order across streams, starts at 1
    timestamp: float
    actor: str  # participant publicId, experimenter identity, or "system"
    kind: str
    payload: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "streamId": self.streamId,
            "sequence": self.sequence,
            "globalSeq": self.globalSeq,
            "timestamp": self.timestamp,
            "actor": self.actor,
            "kind": self.kind,
            "payload": self.payload,
        }

    def canonical_line(self) -> str:
        return canonical_dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "EventRecord":
        return cls(
            streamId=d["streamId"],
            sequence=d["sequence"],
            globalSeq=d["globalSeq"],
            timestamp=d["timestamp"],
            actor=d["actor"],
            kind=d["kind"],
            payload=d.get("payload", {}),
        )


Subscriber = Callable[[EventRecord], None]


class MemoryEventStore:
    """In-process store; also the base class carrying the shared bookkeeping."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._streams: dict[str, list[EventRecord]] = {}
        self._global: list[EventRecord] = []
        self._subscribers: list[Subscriber] = []

    # -- writing ----------------------------------------------------------
    def append(self, stream_id: str, kind: str, payload: dict, actor: str, timestamp: float) -> EventRecord:
        with self._lock:
            stream = self._streams.setdefault(stream_id, [])
            record = EventRecord(
                streamId=stream_id,
                sequence=len(stream) + 1,
                globalSeq=len(self._global) + 1,
                timestamp=timestamp,
                actor=actor,
                kind=kind,
                payload=payload,
            )
            self._persist(record)
            stream.append(record)
            self._global.append(record)
            subscribers = list(self._subscribers)
        for notify in subscribers:
            notify(record)
        return record

    def _persist(self, record: EventRecord) -> None:
        """Durability hook; the memory store keeps nothing outside RAM."""

    # -- reading ----------------------------------------------------------
    def read(self, stream_id: str, from_sequence: int = 1) -> list[EventRecord]:
        with self._lock:
            stream = self._streams.get(stream_id, [])
            return stream[from_sequence - 1 :]

    def all_events(self, from_global: int = 1) -> list[EventRecord]:
        with self._lock:
            return self._global[from_global - 1 :]

    def stream_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._streams)

    def head(self) -> int:
        with self._lock:
            return len(self._global)

    def subscribe(self, fn: Subscriber) -> Callable[[], None]:
        with self._lock:
            self._subscribers.append(fn)

        def cancel() -> None:
            with self._lock:
                if fn in self._subscribers:
                    self._subscribers.remove(fn)

        return cancel


class FileEventStore(MemoryEventStore):
    """Durable store: one canonical-text event per line, fsync before ack.

    The whole log is read back on open; per-stream indexes are rebuilt in
    memory. Snapshots (see SnapshotStore) bound replay cost for large logs.
    """

    def __init__(self, directory: str | Path) -> None:
        super().__init__()
        self._dir = Path(directory)
        self._dir.mkdir(parents=True, exist_ok=True)
        self._path = self._dir / "events.jsonl"
        self._fh = None
        if self._path.exists():
            self._load()
        try:
            self._fh = open(self._path, "a", encoding="utf-8")
        except OSError as e:
            raise StorageFailure(f"cannot open event log: {e}") from e

    def _load(self) -> None:
        try:
            with open(self._path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    record = EventRecord.from_dict(json.loads(line))
                    self._streams.setdefault(record.streamId, []).append(record)
                    self._global.append(record)
        except (OSError, ValueError) as e:
            raise StorageFailure(f"corrupt event log: {e}") from e

    def _persist(self, record: EventRecord) -> None:
        try:
            self._fh.write(record.canonical_line() + "\n")
            self._fh.flush()
            os.fsync(self._fh.fileno())
        except OSError as e:
            raise StorageFailure(f"append failed: {e}") from e

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class SnapshotStore:
    """Periodic full-state snapshots keyed by the globalSeq they cover."""

    INTERVAL = 500  # events between snapshots

    def __init__(self, directory: str | Path | None = None) -> None:
        self._dir = Path(directory) / "snapshots" if directory is not None else None
        if self._dir is not None:
            self._dir.mkdir(parents=True, exist_ok=True)
        self._memory: dict[int, str] = {}

    def save(self, global_seq: int, state_doc: dict) -> None:
        text = canonical_dumps(state_doc)
        if self._dir is None:
            self._memory[global_seq] = text
            return
        try:
            path = self._dir / f"{global_seq:012d}.json"
            tmp = path.with_suffix(".tmp")
            tmp.write_text(text, encoding="utf-8")
            tmp.replace(path)
        except OSError as e:
            raise StorageFailure(f"snapshot write failed: {e}") from e

    def latest(self, at_or_before: int | None = None) -> tuple[int, dict] | None:
        if self._dir is None:
            candidates: Iterable[int] = self._memory
        else:
            candidates = (int(p.stem) for p in self._dir.glob("*.json"))
        eligible = [s for s in candidates if at_or_before is None or s <= at_or_before]
        if not eligible:
            return None
        best = max(eligible)
        if self._dir is None:
            return best, json.loads(self._memory[best])
        return best, json.loads((self._dir / f"{best:012d}.json").read_text(encoding="utf-8"))
