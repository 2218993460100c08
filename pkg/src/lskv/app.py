"""Store application: executes normalized request documents against the MVCC
state and packages mutating outcomes into log entries with Merkle leaves.

Execution is a pure computation over the current state (plus the injected
clock reading); effects land only when the consensus core applies the entry.
Read-only outcomes (including writes that matched nothing) consume no
revision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from lskv import kv, leases, receipts, wire
from lskv.history import HistoricalIndex
from lskv.ledger import governance_action_payload
from lskv.merkle import LeafComponents, MerkleTree
from lskv.types import Forbidden, InvalidArgument, TxID, WriteSet, b64d, b64e

# Lease IDs carry the granting term in the high bits so successive leaders
# never collide.
LEASE_TERM_SHIFT = 24


@dataclass
class Outcome:
    result: dict
    mutating: bool = False
    ws: Optional[WriteSet] = None
    req_kind: str = ""


class StoreApp:
    def __init__(self, ledger_key: bytes, cert_registry: dict = None, admin_subject: str = "admin"):
        self.state = kv.KVState()
        self.tree = MerkleTree()
        self.index = HistoricalIndex()
        self.ledger_key = ledger_key
        self.cert_registry = dict(cert_registry or {})
        self.admin_subject = admin_subject
        self.public_prefixes = []
        self._lease_counters = {}
        self._genesis = []  # meta entries the first leader appends

    def set_genesis_entries(self, entries: list) -> None:
        self._genesis = list(entries)

    def genesis_entries(self) -> list:
        return list(self._genesis)

    def alloc_lease_id(self, term: int) -> int:
        counter = self._lease_counters.get(term, 0) + 1
        self._lease_counters[term] = counter
        return (term << LEASE_TERM_SHIFT) | counter

    # ------------------------------------------------------------- execution

    def execute(self, doc: dict, now: float, term: int, committed_revision: int) -> Outcome:
        op = doc["op"]
        handler = getattr(self, f"_op_{op}", None)
        if handler is None:
            raise InvalidArgument(f"unknown operation {op!r}")
        return handler(doc, now, term, committed_revision)

    def _op_range(self, doc, now, term, committed_revision):
        rng = wire.key_range_from_doc(doc)
        if doc["revision"]:
            result = self.index.query(doc["revision"], rng, doc["limit"], doc["count_only"])
        else:
            result = kv.execute_range(self.state, rng, doc["limit"], doc["count_only"], now)
        return Outcome(result=wire.range_result_obj(result))

    def _op_put(self, doc, now, term, committed_revision):
        key = b64d(doc["key"])
        result, ws = kv.execute_put(self.state, key, b64d(doc["value"]), doc["lease"], doc["prev_kv"], now)
        return Outcome(
            result=wire.put_result_obj(result, key), mutating=True, ws=ws, req_kind="put"
        )

    def _op_delete_range(self, doc, now, term, committed_revision):
        rng = wire.key_range_from_doc(doc)
        result, ws = kv.execute_delete_range(self.state, rng, doc["prev_kv"], now)
        return Outcome(
            result=wire.delete_result_obj(result),
            mutating=not ws.empty(),
            ws=ws,
            req_kind="delete_range",
        )

    def _op_txn(self, doc, now, term, committed_revision):
        compares = [wire.compare_from_doc(c) for c in doc["compare"]]
        success = [wire.txn_op_from_doc(o) for o in doc["success"]]
        failure = [wire.txn_op_from_doc(o) for o in doc["failure"]]
        result, ws = kv.execute_txn(self.state, compares, success, failure, now)
        branch = doc["success"] if result.succeeded else doc["failure"]
        return Outcome(
            result=wire.txn_result_obj(result, branch),
            mutating=not ws.empty(),
            ws=ws,
            req_kind="txn",
        )

    def _op_lease_grant(self, doc, now, term, committed_revision):
        lease, ws = leases.execute_lease_grant(
            self.state, doc["ttl"], doc["id"], now, lambda: self.alloc_lease_id(term)
        )
        return Outcome(
            result={"ID": lease.id, "TTL": lease.granted_ttl},
            mutating=True,
            ws=ws,
            req_kind="lease_grant",
        )

    def _op_lease_keep_alive(self, doc, now, term, committed_revision):
        lease, ws = leases.execute_lease_keep_alive(self.state, doc["id"], now)
        return Outcome(
            result={"ID": lease.id, "TTL": lease.granted_ttl},
            mutating=True,
            ws=ws,
            req_kind="lease_keep_alive",
        )

    def _op_lease_revoke(self, doc, now, term, committed_revision):
        revoked, ws = leases.execute_lease_revoke(self.state, doc["id"], now)
        return Outcome(
            result={"revoked": revoked}, mutating=True, ws=ws, req_kind="lease_revoke"
        )

    def _op_compact(self, doc, now, term, committed_revision):
        result, ws = kv.execute_compaction(self.state, doc["revision"], now, committed_revision)
        return Outcome(
            result={"revision": result.revision}, mutating=True, ws=ws, req_kind="compact"
        )

    def _op_set_public_prefix(self, doc, now, term, committed_revision):
        admin_cert = self.cert_registry.get(self.admin_subject)
        if admin_cert is None or doc["admin_subject"] != self.admin_subject:
            raise Forbidden("unknown admin")
        from lskv import certs

        action = governance_action_payload("set_public_prefix", prefix=doc["prefix"])
        if not certs.verify(admin_cert.public_key, b64d(doc["signature"]), action):
            raise Forbidden("admin signature does not verify")
        prefix = b64d(doc["prefix"])
        if not prefix:
            raise InvalidArgument("empty prefix")
        ws = WriteSet(gov={doc["prefix"]: {"prefix": doc["prefix"]}})
        return Outcome(
            result={"prefix": doc["prefix"], "registered": True},
            mutating=True,
            ws=ws,
            req_kind="set_public_prefix",
        )

    # ----------------------------------------------------------- log plumbing

    def make_entry(self, txid: TxID, request_doc: dict, outcome: Outcome) -> dict:
        leaf = LeafComponents(
            write_set_digest=receipts.write_set_digest(outcome.ws),
            commit_evidence=receipts.commit_evidence(self.ledger_key, txid),
            claims_digest=receipts.claims_digest(request_doc, outcome.result),
        )
        claims = {"request": request_doc, "response": outcome.result}
        if outcome.req_kind == "set_public_prefix":
            return {
                "kind": "gov",
                "term": txid.term,
                "txid": txid,
                "prefix": b64d(request_doc["prefix"]),
                "ws": outcome.ws,
                "leaf": leaf,
                "claims": claims,
                "admin_subject": request_doc["admin_subject"],
                "admin_signature": b64d(request_doc["signature"]),
            }
        return {
            "kind": "tx",
            "term": txid.term,
            "txid": txid,
            "req_kind": outcome.req_kind,
            "ws": outcome.ws,
            "leaf": leaf,
            "claims": claims,
        }

    def apply_entry(self, entry: dict):
        kind = entry["kind"]
        if kind in ("tx", "gov"):
            undo = self.state.apply(entry["txid"], entry["ws"])
            added = []
            for prefix_b64 in entry["ws"].gov:
                prefix = b64d(prefix_b64)
                if prefix not in self.public_prefixes:
                    self.public_prefixes.append(prefix)
                    added.append(prefix)
            return (undo, added)
        if kind == "meta":
            if entry["meta_kind"] == "initial_public_prefix":
                prefix = entry["prefix"]
                if prefix not in self.public_prefixes:
                    self.public_prefixes.append(prefix)
                    return (None, [prefix])
                return (None, [])
            cert = entry["cert"]
            prior = self.cert_registry.get(cert.subject)
            self.cert_registry[cert.subject] = cert
            return ("cert", cert.subject, prior)
        return None

    def revert_entry(self, entry: dict, undo) -> None:
        kind = entry["kind"]
        if kind in ("tx", "gov"):
            kv_undo, added = undo
            for prefix in added:
                self.public_prefixes.remove(prefix)
            self.state.revert(kv_undo)
        elif kind == "meta":
            if entry["meta_kind"] == "initial_public_prefix":
                _, added = undo
                for prefix in added:
                    self.public_prefixes.remove(prefix)
            else:
                _, subject, prior = undo
                if prior is None:
                    self.cert_registry.pop(subject, None)
                else:
                    self.cert_registry[subject] = prior
