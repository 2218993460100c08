"""Single-key-space MVCC state machine.

The map layer stores raw values whose revision fields lag one update behind
(the transaction ID is only assigned after execution), plus the transaction ID
that last wrote each key.  Reads resolve the lag lazily via
``resolve_revisions``.  Execution never mutates state directly: every mutating
request is computed into a :class:`~lskv.types.WriteSet` against a read view,
and the write set is applied (with an undo record) once the transaction has an
ID.  Followers apply the same write sets verbatim, so execution-time inputs
like the leader's clock never diverge across replicas.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from lskv.leases import LeaseTable
from lskv.types import (
    CompactedError,
    FutureRevision,
    InvalidArgument,
    KeyRange,
    LeaseNotFound,
    StoredValue,
    TxID,
    Unimplemented,
    WriteSet,
)


def resolve_revisions(raw: StoredValue, last_mod: TxID) -> StoredValue:
    """Fill in the lagging revision fields of a raw map value.

    create_revision is set from the last writer only if still 0 (first write);
    mod_revision always becomes the last writer's revision.  Idempotent.
    """
    out = raw.copy()
    if out.create_revision == 0:
        out.create_revision = last_mod.revision
    out.mod_revision = last_mod.revision
    return out


@dataclass
class PutResult:
    prev: Optional[StoredValue] = None


@dataclass
class RangeResult:
    kvs: list = field(default_factory=list)  # [(key, StoredValue)] in key order
    count: int = 0


@dataclass
class DeleteResult:
    deleted: int = 0
    prevs: list = field(default_factory=list)  # [(key, StoredValue)] in key order


@dataclass
class TxnResult:
    succeeded: bool = True
    responses: list = field(default_factory=list)  # [(op_kind, result)]


@dataclass
class CompactResult:
    revision: int = 0


@dataclass
class PutOp:
    key: bytes
    value: bytes
    lease: int = 0
    prev_kv: bool = False


@dataclass
class RangeOp:
    range: KeyRange
    limit: int = 0
    count_only: bool = False
    revision: Optional[int] = None


@dataclass
class DeleteRangeOp:
    range: KeyRange
    prev_kv: bool = False


COMPARE_TARGETS = ("version", "create_revision", "mod_revision", "value")
COMPARE_OPS = ("<", "=", ">")


@dataclass
class Compare:
    key: bytes
    target: str  # version | create_revision | mod_revision | value
    op: str  # < | = | >
    value: object  # int for revision/version targets, bytes for value

    def validate(self) -> None:
        if self.target not in COMPARE_TARGETS:
            raise InvalidArgument(f"unknown compare target {self.target!r}")
        if self.op not in COMPARE_OPS:
            raise InvalidArgument(f"unknown compare relation {self.op!r}")
        if not self.key:
            raise InvalidArgument("empty key in compare")
        if self.target == "value":
            if not isinstance(self.value, bytes):
                raise InvalidArgument("value compare needs bytes")
        elif not isinstance(self.value, int):
            raise InvalidArgument(f"{self.target} compare needs an integer")


class KVState:
    """The in-memory map layer plus the lease table it shares fate with."""

    def __init__(self):
        self.map = {}  # key -> (raw StoredValue, last_mod TxID)
        self.leases = LeaseTable()
        self.compacted_revision = 0

    # -- read view ---------------------------------------------------------

    def raw_entry(self, key: bytes):
        return self.map.get(key)

    def visible(self, key: bytes, now: float) -> Optional[StoredValue]:
        """Resolved value, or None if absent or soft-deleted via lease expiry."""
        entry = self.map.get(key)
        if entry is None:
            return None
        raw, last_mod = entry
        if raw.lease and not self.leases.alive(raw.lease, now):
            return None
        return resolve_revisions(raw, last_mod)

    # -- write-set application ----------------------------------------------

    def apply(self, txid: TxID, ws: WriteSet) -> list:
        """Apply a write set, recording an undo list for suffix truncation."""
        undo = []
        for key in sorted(ws.kv):
            value = ws.kv[key]
            prior = self.map.get(key)
            undo.append(("kv", key, prior))
            if prior is not None:
                self.leases.detach(prior[0].lease, key)
            if value is None:
                self.map.pop(key, None)
            else:
                self.map[key] = (value, txid)
                if value.lease:
                    self.leases.attach(value.lease, key)
        for lease_id in sorted(ws.leases):
            lease = ws.leases[lease_id]
            undo.append(("lease", lease_id, self.leases.snapshot(lease_id)))
            self.leases.apply(lease_id, lease)
        if ws.compact_revision is not None:
            undo.append(("compact", None, self.compacted_revision))
            self.compacted_revision = ws.compact_revision
        return undo

    def revert(self, undo: list) -> None:
        for kind, key, prior in reversed(undo):
            if kind == "kv":
                current = self.map.get(key)
                if current is not None:
                    self.leases.detach(current[0].lease, key)
                if prior is None:
                    self.map.pop(key, None)
                else:
                    self.map[key] = prior
                    if prior[0].lease:
                        self.leases.attach(prior[0].lease, key)
            elif kind == "lease":
                self.leases.restore(key, prior)
            elif kind == "compact":
                self.compacted_revision = prior


class _View:
    """Read view over the state plus this request's pending writes.

    Values read back out of the overlay are returned raw: their writing
    transaction has no ID yet, so their revision fields still show the
    pre-transaction state.
    """

    def __init__(self, state: KVState, now: float):
        self.state = state
        self.now = now
        self.overlay = {}  # key -> raw StoredValue | None

    def visible(self, key: bytes) -> Optional[StoredValue]:
        if key in self.overlay:
            raw = self.overlay[key]
            return raw.copy() if raw is not None else None
        return self.state.visible(key, self.now)

    def visible_keys(self, rng: KeyRange) -> list:
        keys = {k for k in self.state.map if rng.contains(k)}
        keys.update(k for k in self.overlay if rng.contains(k))
        out = []
        for k in sorted(keys):
            if self.visible(k) is not None:
                out.append(k)
        return out

    def put_raw(self, key: bytes, raw: StoredValue) -> None:
        self.overlay[key] = raw

    def delete(self, key: bytes) -> None:
        self.overlay[key] = None


def _do_put(view: _View, op: PutOp) -> PutResult:
    if not op.key:
        raise InvalidArgument("empty key")
    if op.lease and not view.state.leases.alive(op.lease, view.now):
        raise LeaseNotFound(f"lease {op.lease} not found or expired")
    prev = view.visible(op.key)
    if prev is None:
        raw = StoredValue(data=op.value, create_revision=0, mod_revision=0, version=1, lease=op.lease)
    else:
        raw = StoredValue(
            data=op.value,
            create_revision=prev.create_revision,
            mod_revision=prev.mod_revision,
            version=prev.version + 1,
            lease=op.lease,
        )
    view.put_raw(op.key, raw)
    return PutResult(prev=prev if op.prev_kv else None)


def _do_range(view: _View, op: RangeOp) -> RangeResult:
    op.range.validate()
    if op.limit < 0:
        raise InvalidArgument("limit must be >= 0")
    keys = view.visible_keys(op.range)
    result = RangeResult(count=len(keys))
    if op.count_only:
        return result
    if op.limit:
        keys = keys[: op.limit]
    result.kvs = [(k, view.visible(k)) for k in keys]
    return result


def _do_delete_range(view: _View, op: DeleteRangeOp) -> DeleteResult:
    op.range.validate()
    keys = view.visible_keys(op.range)
    result = DeleteResult(deleted=len(keys))
    for k in keys:
        if op.prev_kv:
            result.prevs.append((k, view.visible(k)))
        view.delete(k)
    return result


def execute_put(state: KVState, key: bytes, value: bytes, lease: int, prev_kv: bool, now: float):
    view = _View(state, now)
    result = _do_put(view, PutOp(key, value, lease, prev_kv))
    ws = WriteSet(kv=dict(view.overlay))
    return result, ws


def execute_range(state: KVState, rng: KeyRange, limit: int, count_only: bool, now: float) -> RangeResult:
    """Latest-state (optimistic) read; revision-pinned reads go to the index."""
    return _do_range(_View(state, now), RangeOp(rng, limit, count_only))


def execute_delete_range(state: KVState, rng: KeyRange, prev_kv: bool, now: float):
    view = _View(state, now)
    result = _do_delete_range(view, DeleteRangeOp(rng, prev_kv))
    ws = WriteSet(kv=dict(view.overlay))
    return result, ws


def _eval_compare(state: KVState, cmp: Compare, now: float) -> bool:
    cmp.validate()
    value = state.visible(cmp.key, now)
    if cmp.target == "value":
        actual = value.data if value is not None else b""
    elif value is None:
        actual = 0  # absent key compares as version 0 / revisions 0
    else:
        actual = getattr(value, cmp.target)
    if cmp.op == "=":
        return actual == cmp.value
    if cmp.op == "<":
        return actual < cmp.value
    return actual > cmp.value


def execute_txn(state: KVState, compare: list, success: list, failure: list, now: float):
    """All-or-nothing transaction: predicates against pre-state, one branch runs."""
    for op in list(success) + list(failure):
        if not isinstance(op, (PutOp, RangeOp, DeleteRangeOp)):
            raise Unimplemented("nested transactions are not supported")
        if isinstance(op, RangeOp) and op.revision is not None:
            raise InvalidArgument("revision-pinned reads are not supported inside transactions")
    succeeded = all(_eval_compare(state, c, now) for c in compare)
    branch = success if succeeded else failure
    view = _View(state, now)
    result = TxnResult(succeeded=succeeded)
    for op in branch:
        if isinstance(op, PutOp):
            result.responses.append(("put", _do_put(view, op)))
        elif isinstance(op, RangeOp):
            result.responses.append(("range", _do_range(view, op)))
        else:
            result.responses.append(("delete_range", _do_delete_range(view, op)))
    ws = WriteSet(kv=dict(view.overlay))
    return result, ws


def execute_compaction(state: KVState, revision: int, now: float, committed_revision: int):
    """Truncate history below ``revision`` and reap keys of expired leases.

    The reap happens inside this transaction: tombstones land in the write set
    and therefore at the compaction's own revision.
    """
    if revision > committed_revision:
        raise FutureRevision(f"revision {revision} is beyond committed {committed_revision}")
    if revision < state.compacted_revision:
        raise CompactedError(f"revision {revision} already compacted (at {state.compacted_revision})")
    ws = WriteSet(compact_revision=revision)
    for lease in state.leases.expired(now):
        ws.leases[lease.id] = None
        for key in sorted(lease.attached_keys):
            entry = state.map.get(key)
            if entry is not None and entry[0].lease == lease.id:
                ws.kv[key] = None
    return CompactResult(revision=revision), ws
