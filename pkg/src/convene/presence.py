"""Presence: heartbeat tracking and derived facilitation flags.

Heartbeats are commutative per participant, so they bypass the event log and
land in a last-write-wins store. Flags are derived on read: the same
heartbeat history and clock always produce the same flag sequence.
"""

from __future__ import annotations

import statistics
import threading
from dataclasses import dataclass

from convene.model.types import RuntimeSettings


@dataclass(frozen=True)
class PresenceState:
    participantPublicId: str
    lastHeartbeatAt: float | None
    connection: str  # connected | disconnected
    activity: str  # active | idle
    statusFlag: str  # onTrack | lagging | inactive

    def to_dict(self) -> dict:
        return {
            "participantPublicId": self.participantPublicId,
            "lastHeartbeatAt": self.lastHeartbeatAt,
            "connection": self.connection,
            "activity": self.activity,
            "statusFlag": self.statusFlag,
        }


class PresenceStore:
    def __init__(self, settings: RuntimeSettings | None = None) -> None:
        self._settings = settings or RuntimeSettings()
        self._lock = threading.Lock()
        self._heartbeats: dict[str, float] = {}
        self._activity: dict[str, float] = {}

    @property
    def settings(self) -> RuntimeSettings:
        return self._settings

    def record_heartbeat(self, public_id: str, now: float) -> None:
        with self._lock:
            self._heartbeats[public_id] = now
            self._activity.setdefault(public_id, now)

    def record_activity(self, public_id: str, now: float) -> None:
        """Any substantive participant action; heartbeats alone do not count."""
        with self._lock:
            self._activity[public_id] = now
            self._heartbeats[public_id] = now

    def connected(self, public_id: str, now: float) -> bool:
        with self._lock:
            last = self._heartbeats.get(public_id)
        if last is None:
            return False
        window = self._settings.heartbeatIntervalSeconds * self._settings.missedHeartbeatsForDisconnect
        return now - last <= window

    def idle(self, public_id: str, now: float) -> bool:
        with self._lock:
            last = self._activity.get(public_id)
        if last is None:
            return True
        return now - last > self._settings.idleThresholdSeconds

    def derive(self, public_id: str, stage_index: int, cohort_indices: list[int], now: float) -> PresenceState:
        connected = self.connected(public_id, now)
        idle = self.idle(public_id, now)
        flag = derive_status_flag(connected, idle, stage_index, cohort_indices)
        with self._lock:
            last = self._heartbeats.get(public_id)
        return PresenceState(
            participantPublicId=public_id,
            lastHeartbeatAt=last,
            connection="connected" if connected else "disconnected",
            activity="idle" if idle else "active",
            statusFlag=flag,
        )


def derive_status_flag(connected: bool, idle: bool, stage_index: int, cohort_indices: list[int]) -> str:
    """inactive dominates; lagging means more than one stage behind the
    cohort median; everything else is onTrack."""
    if not connected or idle:
        return "inactive"
    if cohort_indices and stage_index < statistics.median(cohort_indices) - 1:
        return "lagging"
    return "onTrack"
