"""Clock abstraction: wall clock for live serving, virtual clock for simulation.

The virtual clock only moves when the driver advances it, so long typing
delays cost nothing in a simulated run. Both expose the same interface so
the engine, gateway, and scheduler never know which one they run on.
"""

from __future__ import annotations

import time


class Clock:
    def now(self) -> float:
        raise NotImplementedError

    def sleep(self, seconds: float) -> None:
        raise NotImplementedError


class WallClock(Clock):
    def now(self) -> float:
        return time.time()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class VirtualClock(Clock):
    """Manually advanced clock. ``sleep`` just moves time forward."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self._now += seconds

    def advance_to(self, t: float) -> None:
        if t < self._now:
            raise ValueError(f"virtual clock cannot move backwards ({t} < {self._now})")
        self._now = float(t)
