"""Per-node historical index of committed transactions.

Maintained asynchronously from consensus (a tick applies newly committed
entries), so it can lag the committed head.  Serves revision-pinned Range
queries and watch replay from per-key revision-ordered histories plus a
global committed-event log.  Queries observe only committed state.
"""

from __future__ import annotations

import threading
from bisect import bisect_right
from dataclasses import dataclass

from lskv.kv import RangeResult, resolve_revisions
from lskv.types import (
    GENESIS,
    CompactedError,
    FutureRevision,
    KeyRange,
    OrderingViolation,
    TxID,
    WatchEvent,
)


@dataclass
class IndexHead:
    applied_txid: TxID
    compacted_revision: int


class HistoricalIndex:
    def __init__(self):
        self.lock = threading.RLock()
        self.per_key = {}  # key -> ([revisions], [StoredValue|None])
        self.events = []  # [(revision, tuple(WatchEvent))], revision-ordered
        self.applied_txid = GENESIS
        self.compacted_revision = 0

    def head(self) -> IndexHead:
        with self.lock:
            return IndexHead(self.applied_txid, self.compacted_revision)

    # ---------------------------------------------------------------- updates

    def apply_committed(self, entries: list) -> list:
        """Apply committed tx entries in order; returns event batches.

        Callers hold ``self.lock`` (the watch dispatch lock) so replay and
        fan-out cannot interleave with application.
        """
        batches = []
        for entry in entries:
            txid = entry["txid"]
            if txid.revision != self.applied_txid.revision + 1:
                raise OrderingViolation(
                    f"index expected revision {self.applied_txid.revision + 1}, got {txid.revision}"
                )
            ws = entry["ws"]
            events = []
            for key in sorted(ws.kv):
                raw = ws.kv[key]
                if raw is None:
                    self._append_key(key, txid.revision, None)
                    events.append(WatchEvent("delete", key, None, txid))
                else:
                    resolved = resolve_revisions(raw, txid)
                    self._append_key(key, txid.revision, resolved)
                    events.append(WatchEvent("put", key, resolved, txid))
            if events:
                self.events.append((txid.revision, tuple(events)))
                batches.append((txid.revision, tuple(events)))
            self.applied_txid = txid
            if ws.compact_revision is not None:
                self._compact(ws.compact_revision)
        return batches

    def _append_key(self, key: bytes, revision: int, value) -> None:
        hist = self.per_key.get(key)
        if hist is None:
            hist = ([], [])
            self.per_key[key] = hist
        hist[0].append(revision)
        hist[1].append(value)

    def _compact(self, revision: int) -> None:
        self.compacted_revision = max(self.compacted_revision, revision)
        for key in list(self.per_key):
            revs, vals = self.per_key[key]
            cut = bisect_right(revs, revision) - 1
            if cut > 0:
                del revs[:cut], vals[:cut]
            # the surviving entry below the compaction point only matters if
            # it still holds a value
            if revs and revs[0] <= revision and vals[0] is None:
                del revs[0], vals[0]
            if not revs:
                del self.per_key[key]
        cut = 0
        while cut < len(self.events) and self.events[cut][0] < revision:
            cut += 1
        del self.events[:cut]

    # ---------------------------------------------------------------- queries

    def query(self, revision: int, rng: KeyRange, limit: int = 0, count_only: bool = False) -> RangeResult:
        rng.validate()
        with self.lock:
            if revision < self.compacted_revision:
                raise CompactedError(
                    f"revision {revision} compacted (compaction point {self.compacted_revision})"
                )
            if revision > self.applied_txid.revision:
                raise FutureRevision(
                    f"revision {revision} beyond index head {self.applied_txid.revision}"
                )
            matches = []
            for key in sorted(self.per_key):
                if not rng.contains(key):
                    continue
                revs, vals = self.per_key[key]
                idx = bisect_right(revs, revision) - 1
                if idx >= 0 and vals[idx] is not None:
                    matches.append((key, vals[idx].copy()))
            result = RangeResult(count=len(matches))
            if count_only:
                return result
            result.kvs = matches[:limit] if limit else matches
            return result

    def events_since(self, start_revision: int) -> list:
        """Committed event batches with revision >= start_revision, in order.
        Callers hold ``self.lock``."""
        if start_revision < self.compacted_revision:
            raise CompactedError(
                f"revision {start_revision} compacted (compaction point {self.compacted_revision})"
            )
        lo = 0
        while lo < len(self.events) and self.events[lo][0] < start_revision:
            lo += 1
        return self.events[lo:]


def rebuild_from_entries(entries: list) -> HistoricalIndex:
    """Deterministic offline rebuild (e.g. from a ledger's committed prefix)."""
    index = HistoricalIndex()
    with index.lock:
        index.apply_committed(entries)
    return index
