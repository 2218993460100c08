"""Deterministic cluster simulation.

Runs real consensus cores over a virtual clock and an in-process network with
seeded delays, drops, partitions, crashes, and restarts.  Everything —
including key material — derives from the seed, so a (seed, script) pair
replays identically.

Fault scripts are JSON:

    {"nodes": 3, "duration": 15.0, "events": [
        {"at": 1.0, "kind": "put", "key": "a", "value": "1"},
        {"at": 2.0, "kind": "partition", "groups": [["n0"], ["n1", "n2"]]},
        {"at": 4.0, "kind": "heal"},
        {"at": 5.0, "kind": "crash", "node": "n1"},
        {"at": 7.0, "kind": "restart", "node": "n1"},
        {"at": 9.0, "kind": "depose"}
    ]}

``depose`` isolates the current leader until a new one is elected, forcing a
term change.  Run a script from the command line with
``python -m lskv.sim --seed 7 --script faults.json``.
"""

from __future__ import annotations

import heapq
import io
import random
from dataclasses import dataclass, field

from lskv import certs
from lskv.app import StoreApp
from lskv.ledger import LedgerWriter
from lskv.raft import LEADER, RaftConfig, RaftCore
from lskv.types import LSKVError, TxID, b64e
from lskv.watch import WatchEngine
from lskv.wire import normalize_request

SIM_CONFIG = RaftConfig(
    election_timeout=(0.05, 0.10),
    heartbeat_interval=0.02,
    signature_interval=0.25,
    batch_count=64,
    batch_time=0.002,
)


def deterministic_cluster_keys(rng: random.Random, node_ids: list) -> certs.ClusterKeys:
    def keygen():
        return certs.private_key_from_bytes(rng.randbytes(32))

    service_key = keygen()
    service_pub = certs.public_key_bytes(service_key)
    service_cert = certs.issue_certificate("service", "service", service_pub, "service", service_key)
    admin_key = keygen()
    admin_cert = certs.issue_certificate(
        "admin", "admin", certs.public_key_bytes(admin_key), "service", service_key
    )
    node_keys, node_certs = {}, {}
    for node_id in node_ids:
        key = keygen()
        node_keys[node_id] = key
        node_certs[node_id] = certs.issue_certificate(
            node_id, "node", certs.public_key_bytes(key), "service", service_key
        )
    return certs.ClusterKeys(
        service_key=service_key,
        service_cert=service_cert,
        ledger_key=rng.randbytes(32),
        admin_key=admin_key,
        admin_cert=admin_cert,
        node_keys=node_keys,
        node_certs=node_certs,
    )


def genesis_meta_entries(keys: certs.ClusterKeys, initial_prefixes: list = ()) -> list:
    entries = [
        {"kind": "meta", "term": 0, "meta_kind": "node_identity", "cert": cert, "node_id": node_id}
        for node_id, cert in sorted(keys.node_certs.items())
    ]
    entries.append({"kind": "meta", "term": 0, "meta_kind": "admin_identity", "cert": keys.admin_cert})
    for prefix in initial_prefixes:
        entries.append({"kind": "meta", "term": 0, "meta_kind": "initial_public_prefix", "prefix": prefix})
    return entries


class SimNode:
    def __init__(self, cluster, node_id: str, voter: bool = True, entries: list = None):
        self.cluster = cluster
        self.node_id = node_id
        keys = cluster.keys
        registry = dict(keys.node_certs)
        registry["admin"] = keys.admin_cert
        registry["service"] = keys.service_cert
        self.app = StoreApp(keys.ledger_key, cert_registry=registry)
        self.app.set_genesis_entries(genesis_meta_entries(keys))
        self.core = RaftCore(
            node_id,
            cluster.node_ids,
            self.app,
            keys.node_keys[node_id],
            config=cluster.config,
            rng=random.Random(f"{cluster.seed}:{node_id}"),
            now=cluster.now,
            voter=voter,
        )
        self.engine = WatchEngine(self.app.index)
        self.core.on_commit = self.engine.apply_and_publish
        if entries:
            for entry in entries:
                self.core._append(entry)
            self.core.current_term = max(e["term"] for e in entries)
        self.writer = None
        self.alive = True

    @property
    def role(self):
        return self.core.role


class SimCluster:
    def __init__(self, n: int = 3, seed: int = 0, config: RaftConfig = None, with_ledger: bool = False):
        self.seed = seed
        self.rng = random.Random(f"cluster:{seed}")
        self.config = config or SIM_CONFIG
        self.node_ids = [f"n{i}" for i in range(n)]
        self.keys = deterministic_cluster_keys(self.rng, self.node_ids)
        self.now = 0.0
        self.queue = []  # (deliver_at, seq, dest, msg)
        self._seq = 0
        self.groups = None  # partition groups, None = fully connected
        self.delay_range = (0.0005, 0.004)
        self.drop_rate = 0.0
        self.with_ledger = with_ledger
        self.disks = {}
        self.nodes = {}
        for node_id in self.node_ids:
            self._make_node(node_id, voter=True)
        self.acked = []  # [(txid, doc)] successfully acknowledged mutations
        self.trace = []

    def _make_node(self, node_id: str, voter: bool) -> None:
        node = SimNode(self, node_id, voter=voter)
        if self.with_ledger:
            disk = self.disks.setdefault(node_id, io.BytesIO())
            writer = LedgerWriter(fileobj=disk, ledger_key=self.keys.ledger_key)
            node.writer = writer
            node.core.ledger_append = writer.append_entry
            node.core.ledger_truncate = writer.truncate_to
        self.nodes[node_id] = node

    # ------------------------------------------------------------- topology

    def connected(self, a: str, b: str) -> bool:
        if self.groups is None:
            return True
        for group in self.groups:
            if a in group:
                return b in group
        return False

    def partition(self, groups: list) -> None:
        self.groups = [set(g) for g in groups]
        self.trace.append((round(self.now, 6), "partition", tuple(sorted(map(tuple, map(sorted, groups))))))

    def heal(self) -> None:
        self.groups = None
        self.trace.append((round(self.now, 6), "heal"))

    def crash(self, node_id: str) -> None:
        self.nodes[node_id].alive = False
        self.trace.append((round(self.now, 6), "crash", node_id))

    def restart(self, node_id: str) -> None:
        """Amnesia restart: state rebuilt from the node's ledger file if any;
        rejoins as a non-voter (its pre-crash votes are unrecoverable)."""
        if self.with_ledger:
            writer, entries = LedgerWriter.resume(self.keys.ledger_key, fileobj=self.disks[node_id])
            node = SimNode(self, node_id, voter=False, entries=entries or None)
            node.writer = writer
            node.core.ledger_append = writer.append_entry
            node.core.ledger_truncate = writer.truncate_to
        else:
            node = SimNode(self, node_id, voter=False)
        node.core._election_deadline = self.now + node.core._election_timeout()
        self.nodes[node_id] = node
        self.trace.append((round(self.now, 6), "restart", node_id))

    # ------------------------------------------------------------- transport

    def _drain(self, node: SimNode) -> None:
        for dest, msg in node.core.take_outbox():
            self.trace.append(
                (round(self.now, 6), "send", node.node_id, dest, msg["kind"], msg["term"])
            )
            if self.drop_rate and self.rng.random() < self.drop_rate:
                continue
            delay = self.rng.uniform(*self.delay_range)
            self._seq += 1
            heapq.heappush(self.queue, (self.now + delay, self._seq, node.node_id, dest, msg))

    def _deliver_due(self) -> None:
        while self.queue and self.queue[0][0] <= self.now:
            _, _, src, dest, msg = heapq.heappop(self.queue)
            node = self.nodes[dest]
            if not node.alive or not self.connected(src, dest):
                continue
            node.core.receive(msg, self.now)
            self._drain(node)

    # ------------------------------------------------------------------ clock

    def step(self, limit: float) -> None:
        targets = [limit]
        if self.queue:
            targets.append(self.queue[0][0])
        for node in self.nodes.values():
            if node.alive:
                targets.append(node.core.next_deadline())
        t = min(targets)
        self.now = max(self.now, min(t, limit))
        self._deliver_due()
        for node in self.nodes.values():
            if node.alive:
                node.core.tick(self.now)
                self._drain(node)

    def run_for(self, duration: float) -> None:
        end = self.now + duration
        while self.now < end:
            before = self.now
            self.step(end)
            if self.now == before:
                self.now = min(end, self.now + 1e-4)  # idle guard

    def run_until(self, cond, timeout: float = 10.0) -> bool:
        end = self.now + timeout
        while self.now < end:
            if cond():
                return True
            before = self.now
            self.step(min(before + 0.05, end))
            if self.now == before:
                self.now = min(end, self.now + 1e-4)
        return cond()

    # ------------------------------------------------------------------ client

    def leader(self):
        leaders = [n for n in self.nodes.values() if n.alive and n.role == LEADER]
        if not leaders:
            return None
        return max(leaders, key=lambda n: n.core.current_term)

    def wait_for_leader(self, timeout: float = 5.0):
        self.run_until(lambda: self.leader() is not None, timeout)
        return self.leader()

    def client(self, doc_or_op, body: dict = None, node_id: str = None):
        """Issue a request; returns (result_doc, txid).  Raises LSKVError."""
        if isinstance(doc_or_op, str):
            doc = normalize_request(doc_or_op, body or {})
        else:
            doc = doc_or_op
        node = self.nodes[node_id] if node_id else self.leader()
        if node is None or not node.alive:
            raise LSKVError("no live node to serve the request")
        result, txid = node.core.handle_client(doc, self.now, self.now)
        self._drain(node)
        if txid is not None:
            self.acked.append((txid, doc))
            self.trace.append((round(self.now, 6), "ack", txid.term, txid.revision))
        return result, txid

    def put(self, key: bytes, value: bytes, lease: int = 0, node_id: str = None):
        return self.client(
            "put", {"key": b64e(key), "value": b64e(value), "lease": lease}, node_id=node_id
        )

    def statuses(self, txid: TxID) -> dict:
        return {
            node_id: node.core.tx_status(txid)
            for node_id, node in self.nodes.items()
            if node.alive
        }

    def committed_everywhere(self) -> TxID:
        alive = [n for n in self.nodes.values() if n.alive]
        return min((n.core.committed_txid for n in alive), key=lambda t: t.revision)

    def trace_digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for item in self.trace:
            h.update(repr(item).encode())
        return h.hexdigest()


# ------------------------------------------------------------------- scripts


@dataclass
class ScriptResult:
    cluster: SimCluster
    acked: list = field(default_factory=list)
    errors: list = field(default_factory=list)


def run_script(seed: int, script: dict) -> ScriptResult:
    cluster = SimCluster(
        n=int(script.get("nodes", 3)), seed=seed, with_ledger=bool(script.get("ledger", False))
    )
    result = ScriptResult(cluster=cluster)
    events = sorted(script.get("events", []), key=lambda e: float(e["at"]))
    duration = float(script.get("duration", 15.0))
    deposed_until = None

    cluster.wait_for_leader()
    for event in events:
        at = float(event["at"])
        if at > cluster.now:
            cluster.run_for(at - cluster.now)
        kind = event["kind"]
        try:
            if kind == "put":
                cluster.put(event["key"].encode(), event["value"].encode())
            elif kind == "partition":
                cluster.partition([set(g) for g in event["groups"]])
            elif kind == "heal":
                cluster.heal()
            elif kind == "crash":
                cluster.crash(event["node"])
            elif kind == "restart":
                cluster.restart(event["node"])
            elif kind == "depose":
                leader = cluster.leader()
                if leader is not None:
                    others = [n for n in cluster.node_ids if n != leader.node_id]
                    term = leader.core.current_term
                    cluster.partition([{leader.node_id}, set(others)])
                    cluster.run_until(
                        lambda: cluster.leader() is not None
                        and cluster.leader().core.current_term > term,
                        5.0,
                    )
                    cluster.heal()
            else:
                raise LSKVError(f"unknown script event {kind!r}")
        except LSKVError as exc:
            result.errors.append((cluster.now, kind, str(exc)))
    if cluster.now < duration:
        cluster.run_for(duration - cluster.now)
    cluster.heal()
    cluster.run_for(1.0)
    result.acked = list(cluster.acked)
    return result


def main(argv=None) -> int:
    import argparse
    import json

    parser = argparse.ArgumentParser(prog="lskv-sim", description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--script", required=True, help="fault script JSON file")
    args = parser.parse_args(argv)
    with open(args.script) as f:
        script = json.load(f)
    result = run_script(args.seed, script)
    cluster = result.cluster
    leader = cluster.leader()
    summary = {
        "seed": args.seed,
        "acked": len(result.acked),
        "errors": result.errors,
        "leader": leader.node_id if leader else None,
        "committed": leader.core.committed_txid.as_list() if leader else None,
        "statuses": {
            str(txid): {n: s.value for n, s in cluster.statuses(txid).items()}
            for txid, _ in result.acked
        },
        "trace_digest": cluster.trace_digest(),
    }
    print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
