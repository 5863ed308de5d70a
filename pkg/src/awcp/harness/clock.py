from __future__ import annotations

import threading
from datetime import datetime, timedelta

from ..protocol import utc_now


class OffsetClock:
    """Wall clock that tests can push forward; shared by both services of a run."""

    def __init__(self, offset: float = 0.0):
        self._offset = timedelta(seconds=offset)
        self._lock = threading.Lock()

    def __call__(self) -> datetime:
        with self._lock:
            return utc_now() + self._offset

    def advance(self, seconds: float) -> None:
        with self._lock:
            self._offset += timedelta(seconds=seconds)
