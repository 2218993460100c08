"""Committed-only event streams over key ranges.

Watches start from the live head or replay from a historical revision; replay
and registration happen atomically under the index's dispatch lock, so the
switch from replayed to live events has no gaps and no duplicates.  Each watch
has a bounded buffer; overflow cancels the watch with a notice rather than
ever blocking consensus or the indexer.
"""

from __future__ import annotations

import threading
from collections import deque
from typing import Optional

from lskv.history import HistoricalIndex
from lskv.types import KeyRange

DEFAULT_BUFFER = 1024

EVENT = "event"
CANCELED = "canceled"


class Watch:
    def __init__(self, watch_id: int, rng: KeyRange, limit: int):
        self.id = watch_id
        self.range = rng
        self.limit = limit
        self.cancelled = False
        self.cancel_reason: Optional[str] = None
        self._items = deque()
        self._cond = threading.Condition()

    def _push(self, item) -> None:
        with self._cond:
            self._items.append(item)
            self._cond.notify()

    def get(self, timeout: Optional[float] = None):
        """Next (kind, payload) item, or None on timeout."""
        with self._cond:
            if not self._items:
                self._cond.wait(timeout)
            return self._items.popleft() if self._items else None

    def drain(self) -> list:
        with self._cond:
            items = list(self._items)
            self._items.clear()
            return items

    def pending(self) -> int:
        with self._cond:
            return len(self._items)


class WatchEngine:
    def __init__(self, index: HistoricalIndex, buffer_limit: int = DEFAULT_BUFFER):
        self.index = index
        self.buffer_limit = buffer_limit
        self.watches = {}
        self._next_id = 0

    def create_watch(self, rng: KeyRange, start_revision: Optional[int] = None) -> Watch:
        rng.validate()
        with self.index.lock:
            self._next_id += 1
            watch = Watch(self._next_id, rng, self.buffer_limit)
            if start_revision is not None:
                for _, events in self.index.events_since(start_revision):
                    for event in events:
                        if rng.contains(event.key):
                            self._deliver(watch, event)
            if not watch.cancelled:
                self.watches[watch.id] = watch
            return watch

    def cancel_watch(self, watch_id: int, reason: str = "cancelled") -> None:
        with self.index.lock:
            watch = self.watches.pop(watch_id, None)
            if watch is not None and not watch.cancelled:
                watch.cancelled = True
                watch.cancel_reason = reason
                watch._push((CANCELED, reason))

    def _deliver(self, watch: Watch, event) -> None:
        if watch.pending() >= watch.limit:
            watch.cancelled = True
            watch.cancel_reason = "overflow"
            self.watches.pop(watch.id, None)
            watch._push((CANCELED, "overflow"))
            return
        watch._push((EVENT, event))

    def publish_committed(self, batches: list) -> None:
        """Fan out event batches (already in revision order) to active watches.
        Callers hold the index lock."""
        for _, events in batches:
            for event in events:
                for watch in list(self.watches.values()):
                    if watch.range.contains(event.key):
                        self._deliver(watch, event)

    def apply_and_publish(self, entries: list) -> None:
        """Apply committed entries to the index and fan out their events in one
        critical section (the indexer tick path)."""
        with self.index.lock:
            batches = self.index.apply_committed(entries)
            self.publish_committed(batches)
