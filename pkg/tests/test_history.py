"""Historical index: revision-pinned reads, compaction, and rebuild."""

import pytest

from lskv.history import HistoricalIndex, rebuild_from_entries
from lskv.sim import SimCluster
from lskv.types import (
    CompactedError,
    FutureRevision,
    KeyRange,
    OrderingViolation,
    StoredValue,
    TxID,
    WriteSet,
)


def tx_entry(term, rev, writes):
    return {"kind": "tx", "term": term, "txid": TxID(term, rev), "ws": WriteSet(kv=writes)}


def test_put_then_delete_window():
    index = HistoricalIndex()
    with index.lock:
        index.apply_committed(
            [
                tx_entry(1, 1, {b"x": StoredValue(b"other")}),
                tx_entry(1, 2, {b"pad": StoredValue(b"p")}),
                tx_entry(1, 3, {b"k": StoredValue(b"v")}),
                tx_entry(1, 4, {b"pad": StoredValue(b"p2")}),
                tx_entry(1, 5, {b"k": None}),
            ]
        )
    at4 = index.query(4, KeyRange(b"k"))
    assert at4.count == 1
    assert at4.kvs[0][1].mod_revision == 3
    at5 = index.query(5, KeyRange(b"k"))
    assert at5.count == 0


def test_head_matches_latest_on_idle_cluster():
    cluster = SimCluster(n=1, seed=21)
    cluster.wait_for_leader()
    for i in range(6):
        cluster.put(b"h%d" % i, b"v%d" % i)
    cluster.run_for(0.6)
    leader = cluster.leader()
    head = leader.app.index.applied_txid.revision
    assert head == leader.core.committed_txid.revision
    latest, _ = cluster.client("range", {"key": "aA==", "range_end": "AA=="})
    pinned, _ = cluster.client("range", {"key": "aA==", "range_end": "AA==", "revision": head})
    assert latest == pinned


def test_future_revision_beyond_head():
    index = HistoricalIndex()
    with index.lock:
        index.apply_committed([tx_entry(1, 1, {b"k": StoredValue(b"v")})])
    with pytest.raises(FutureRevision):
        index.query(2, KeyRange(b"k"))


def test_compaction_gates_queries():
    index = HistoricalIndex()
    with index.lock:
        index.apply_committed(
            [
                tx_entry(1, 1, {b"k": StoredValue(b"v1")}),
                tx_entry(1, 2, {b"k": StoredValue(b"v2", create_revision=1, mod_revision=1, version=2)}),
                {"kind": "tx", "term": 1, "txid": TxID(1, 3), "ws": WriteSet(compact_revision=2)},
            ]
        )
    with pytest.raises(CompactedError):
        index.query(1, KeyRange(b"k"))
    at2 = index.query(2, KeyRange(b"k"))
    assert at2.kvs[0][1].version == 2
    assert at2.kvs[0][1].mod_revision == 2


def test_ordering_violation_on_gap():
    index = HistoricalIndex()
    with index.lock:
        index.apply_committed([tx_entry(1, 1, {b"k": StoredValue(b"v")})])
        with pytest.raises(OrderingViolation):
            index.apply_committed([tx_entry(1, 3, {b"k": StoredValue(b"v3")})])


def test_noop_tick_leaves_head_unchanged():
    index = HistoricalIndex()
    with index.lock:
        index.apply_committed([tx_entry(1, 1, {b"k": StoredValue(b"v")})])
        head = index.head()
        index.apply_committed([])
    assert index.head() == head


def test_rebuild_matches_original():
    entries = [
        tx_entry(1, 1, {b"a": StoredValue(b"1")}),
        tx_entry(1, 2, {b"b": StoredValue(b"2")}),
        tx_entry(1, 3, {b"a": None}),
        tx_entry(2, 4, {b"c": StoredValue(b"3")}),
    ]
    first = rebuild_from_entries(entries)
    second = rebuild_from_entries(entries)
    assert first.per_key == second.per_key
    assert first.applied_txid == second.applied_txid


def test_resolved_values_in_history():
    # raw (lagging) values come in; the index stores them resolved
    index = HistoricalIndex()
    raw = StoredValue(b"v", create_revision=0, mod_revision=0, version=1)
    with index.lock:
        index.apply_committed([tx_entry(1, 1, {b"k": raw})])
    got = index.query(1, KeyRange(b"k")).kvs[0][1]
    assert (got.create_revision, got.mod_revision) == (1, 1)
