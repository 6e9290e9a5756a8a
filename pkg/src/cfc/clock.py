"""Injected time sources (milliseconds since the epoch).

Nothing in the package reads the system clock directly for protocol
decisions; actors are handed a clock so tests control time completely.
"""

from __future__ import annotations

import threading
import time
from typing import Callable

Clock = Callable[[], int]

SECOND = 1000
MINUTE = 60 * SECOND
HOUR = 60 * MINUTE
DAY = 24 * HOUR


def system_clock() -> int:
    return time.time_ns() // 1_000_000


class ManualClock:
    """A settable clock.  ``offset`` models skew relative to a shared base."""

    def __init__(self, now: int = 0):
        self._now = int(now)
        self._lock = threading.Lock()

    def __call__(self) -> int:
        return self._now

    def set(self, now: int) -> None:
        with self._lock:
            self._now = int(now)

    def advance(self, ms: int) -> int:
        with self._lock:
            self._now += int(ms)
            return self._now


class SkewedClock:
    def __init__(self, base: Clock, offset_ms: int):
        self.base = base
        self.offset_ms = int(offset_ms)

    def __call__(self) -> int:
        return self.base() + self.offset_ms
