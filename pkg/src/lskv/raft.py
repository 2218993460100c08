"""Leader-based log replication with signature-gated commit.

A variant of Raft: the leader executes mutating requests, assigns them
(term, revision) IDs, acknowledges the client immediately, and replicates log
entries to followers.  Commit only advances when a *signature entry* (the
leader's signature over the Merkle root covering all transactions so far) has
been replicated to a majority; every transaction at or below it becomes
Committed.

The core is sans-I/O: callers feed it messages, client requests, and clock
ticks; it appends outbound messages to an outbox the caller drains.  The same
core runs under the production TCP transport and the deterministic simulation
harness.

Log entry kinds:
  tx      -- a mutating client transaction (consumes one revision, Merkle leaf)
  gov     -- a governance transaction (consumes a revision, Merkle leaf)
  sig     -- leader's signature over the current root (no revision)
  marker  -- appended on election: declares (term, next revision) and carries
             the term history; consumes no revision
  meta    -- genesis identity/config records (no revision)

Wire protocol (peer messages, versioned): append / append_resp / vote /
vote_resp dicts; over TCP they travel as length-prefixed JSON frames.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from lskv import certs
from lskv.merkle import LeafComponents, proof_from_obj, proof_to_obj
from lskv.receipts import Receipt
from lskv.types import (
    GENESIS,
    InvalidTx,
    NotFound,
    NotLeader,
    NotYetSignable,
    TxID,
    TxStatus,
    WriteSet,
    b64d,
    b64e,
    hexd,
)

FOLLOWER = "follower"
CANDIDATE = "candidate"
LEADER = "leader"

PROTOCOL_VERSION = 1
MAX_APPEND_BATCH = 256

# Requests that go through the leader; everything else serves locally.
MUTATING_OPS = frozenset(
    {
        "put",
        "delete_range",
        "txn",
        "lease_grant",
        "lease_revoke",
        "lease_keep_alive",
        "compact",
        "set_public_prefix",
    }
)


@dataclass
class RaftConfig:
    election_timeout: tuple = (0.15, 0.30)
    heartbeat_interval: float = 0.05
    signature_interval: float = 1.0
    batch_count: int = 128
    batch_time: float = 0.005


def entry_is_leaf(entry: dict) -> bool:
    return entry["kind"] in ("tx", "gov")


def entry_to_obj(entry: dict) -> dict:
    kind = entry["kind"]
    obj = {"kind": kind, "term": entry["term"]}
    if kind == "tx":
        obj.update(
            txid=entry["txid"].as_list(),
            req_kind=entry["req_kind"],
            ws=entry["ws"].to_obj(),
            leaf=entry["leaf"].to_obj(),
            claims=entry["claims"],
        )
    elif kind == "gov":
        obj.update(
            txid=entry["txid"].as_list(),
            prefix=b64e(entry["prefix"]),
            ws=entry["ws"].to_obj(),
            leaf=entry["leaf"].to_obj(),
            claims=entry["claims"],
            admin_subject=entry["admin_subject"],
            admin_signature=b64e(entry["admin_signature"]),
        )
    elif kind == "sig":
        obj.update(
            node=entry["node"],
            covers=entry["covers"].as_list(),
            root=entry["root"].hex(),
            leaf_count=entry["leaf_count"],
            signature=b64e(entry["signature"]),
        )
    elif kind == "marker":
        obj.update(next_revision=entry["next_revision"])
    elif kind == "meta":
        obj.update(meta_kind=entry["meta_kind"])
        if entry["meta_kind"] == "initial_public_prefix":
            obj.update(prefix=b64e(entry["prefix"]))
        else:
            obj.update(cert=entry["cert"].to_pem())
            if "node_id" in entry:
                obj.update(node_id=entry["node_id"])
    return obj


def entry_from_obj(obj: dict) -> dict:
    kind = obj["kind"]
    entry = {"kind": kind, "term": int(obj["term"])}
    if kind == "tx":
        entry.update(
            txid=TxID.from_list(obj["txid"]),
            req_kind=obj["req_kind"],
            ws=WriteSet.from_obj(obj["ws"]),
            leaf=LeafComponents.from_obj(obj["leaf"]),
            claims=obj["claims"],
        )
    elif kind == "gov":
        entry.update(
            txid=TxID.from_list(obj["txid"]),
            prefix=b64d(obj["prefix"]),
            ws=WriteSet.from_obj(obj["ws"]),
            leaf=LeafComponents.from_obj(obj["leaf"]),
            claims=obj["claims"],
            admin_subject=obj["admin_subject"],
            admin_signature=b64d(obj["admin_signature"]),
        )
    elif kind == "sig":
        entry.update(
            node=obj["node"],
            covers=TxID.from_list(obj["covers"]),
            root=hexd(obj["root"]),
            leaf_count=int(obj["leaf_count"]),
            signature=b64d(obj["signature"]),
        )
    elif kind == "marker":
        entry.update(next_revision=int(obj["next_revision"]))
    elif kind == "meta":
        entry.update(meta_kind=obj["meta_kind"])
        if obj["meta_kind"] == "initial_public_prefix":
            entry.update(prefix=b64d(obj["prefix"]))
        else:
            entry.update(cert=certs.Certificate.from_pem(obj["cert"]))
            if "node_id" in obj:
                entry.update(node_id=obj["node_id"])
    return entry


class RaftCore:
    """Consensus state for one node; all methods run on one execution context."""

    def __init__(
        self,
        node_id: str,
        peers: list,
        app,
        signing_key,
        config: RaftConfig = None,
        rng: random.Random = None,
        now: float = 0.0,
        voter: bool = True,
    ):
        self.node_id = node_id
        self.peers = [p for p in peers if p != node_id]
        self.cluster = sorted(set(peers) | {node_id})
        self.quorum = len(self.cluster) // 2 + 1
        self.app = app
        self.signing_key = signing_key
        self.config = config or RaftConfig()
        self.rng = rng or random.Random()
        self.voter = voter

        self.role = FOLLOWER
        self.current_term = 0
        self.voted_for = None
        self.leader_hint = None
        self.votes = set()

        self.log = []
        self.undo = []
        self.commit_count = 0
        self.committed_txid = GENESIS
        self.next_revision = 1
        self.last_leaf_txid = GENESIS
        self.rev_index = {}  # revision -> log position of its tx/gov entry
        self.markers = []  # [(term, next_revision, log position)] in log order
        self.committed_markers = []  # [(term, next_revision)] committed prefix
        self.committed_sigs = []  # [(leaf_count, log position)] committed prefix
        self.discarded = {}  # TxID -> True for truncated local entries, until resolved

        self.match = {p: 0 for p in self.peers}
        self.next = {p: 0 for p in self.peers}
        self.sent = {p: 0 for p in self.peers}

        self._out = []  # [(dest, msg)]
        self.on_commit = None  # callable(list of committed entries)
        self.ledger_append = None  # callable(entry)
        self.ledger_truncate = None  # callable(record_count)

        self._election_deadline = now + self._election_timeout()
        self._next_heartbeat = now
        self._next_signature = now + self.config.signature_interval
        self._next_flush = None
        self._pending_since_flush = 0

    # ------------------------------------------------------------------ util

    def _election_timeout(self) -> float:
        lo, hi = self.config.election_timeout
        return self.rng.uniform(lo, hi)

    def take_outbox(self) -> list:
        out, self._out = self._out, []
        return out

    def _send(self, dest: str, msg: dict) -> None:
        msg["v"] = PROTOCOL_VERSION
        msg["from"] = self.node_id
        msg["term"] = self.current_term
        self._out.append((dest, msg))

    def last_log_term(self) -> int:
        return self.log[-1]["term"] if self.log else 0

    def last_revision(self) -> int:
        return self.next_revision - 1

    def is_leader(self) -> bool:
        return self.role == LEADER

    # ------------------------------------------------------------ log moves

    def _append(self, entry: dict) -> None:
        if entry_is_leaf(entry):
            entry["leaf_index"] = self.app.tree.size
            self.app.tree.append(entry["leaf"].leaf_digest())
            self.rev_index[entry["txid"].revision] = len(self.log)
            self.next_revision = entry["txid"].revision + 1
            self.last_leaf_txid = entry["txid"]
        elif entry["kind"] == "marker":
            self.markers.append((entry["term"], entry["next_revision"], len(self.log)))
        self.log.append(entry)
        self.undo.append(self.app.apply_entry(entry))
        if self.ledger_append is not None:
            self.ledger_append(entry)
        if self.role == LEADER:
            self._pending_since_flush += 1

    def _truncate(self, count: int) -> None:
        assert count >= self.commit_count, "cannot truncate committed entries"
        for i in range(len(self.log) - 1, count - 1, -1):
            entry = self.log[i]
            self.app.revert_entry(entry, self.undo[i])
            if entry_is_leaf(entry):
                del self.rev_index[entry["txid"].revision]
                self.discarded[entry["txid"]] = True
        del self.log[count:]
        del self.undo[count:]
        self.markers = [m for m in self.markers if m[2] < count]
        leaf_count = 0
        self.last_leaf_txid = self.committed_txid
        self.next_revision = self.committed_txid.revision + 1
        for entry in reversed(self.log):
            if entry_is_leaf(entry):
                leaf_count = entry["leaf_index"] + 1
                self.last_leaf_txid = entry["txid"]
                self.next_revision = entry["txid"].revision + 1
                break
        self.app.tree.truncate(leaf_count)
        if self.ledger_truncate is not None:
            self.ledger_truncate(count)

    def _advance_commit_to(self, count: int) -> None:
        if count <= self.commit_count:
            return
        newly = []
        for i in range(self.commit_count, count):
            entry = self.log[i]
            kind = entry["kind"]
            if kind == "sig":
                self.committed_sigs.append((entry["leaf_count"], i))
                self.committed_txid = entry["covers"]
            elif kind == "marker":
                self.committed_markers.append((entry["term"], entry["next_revision"]))
            elif entry_is_leaf(entry):
                newly.append(entry)
        self.commit_count = count
        if self.discarded:
            committed_rev = self.committed_txid.revision
            frontier = self.committed_markers[-1][1] if self.committed_markers else 1
            self.discarded = {
                t: True
                for t in self.discarded
                if t.revision > committed_rev and t.revision >= frontier
            }
        if newly and self.on_commit is not None:
            self.on_commit(newly)

    def _leader_advance_commit(self) -> None:
        if self.role != LEADER:
            return
        matches = sorted(
            [len(self.log)] + [self.match[p] for p in self.peers], reverse=True
        )
        majority_match = matches[self.quorum - 1] if len(matches) >= self.quorum else 0
        for pos in range(majority_match - 1, self.commit_count - 1, -1):
            entry = self.log[pos]
            if entry["kind"] == "sig" and entry["term"] == self.current_term:
                self._advance_commit_to(pos + 1)
                break

    # ------------------------------------------------------------- elections

    def _step_down(self, term: int) -> None:
        if term > self.current_term:
            self.current_term = term
            self.voted_for = None
        self.role = FOLLOWER
        self.votes = set()

    def _start_election(self, now: float) -> None:
        if not self.voter:
            return
        self.current_term += 1
        self.role = CANDIDATE
        self.voted_for = self.node_id
        self.leader_hint = None
        self.votes = {self.node_id}
        self._election_deadline = now + self._election_timeout()
        for peer in self.peers:
            self._send(
                peer,
                {
                    "kind": "vote",
                    "last_count": len(self.log),
                    "last_term": self.last_log_term(),
                },
            )
        if len(self.votes) >= self.quorum:
            self._become_leader(now)

    def _become_leader(self, now: float) -> None:
        self.role = LEADER
        self.leader_hint = self.node_id
        for peer in self.peers:
            self.next[peer] = len(self.log)
            self.sent[peer] = len(self.log)
            self.match[peer] = 0
        genesis = not self.log
        self._append(
            {"kind": "marker", "term": self.current_term, "next_revision": self.next_revision}
        )
        if genesis:
            for entry in self.app.genesis_entries():
                self._append(entry)
        self._next_signature = now + self.config.signature_interval
        self._next_heartbeat = now  # assert leadership immediately
        self._pending_since_flush = 0
        self._next_flush = None
        self._leader_advance_commit()  # single-node clusters commit instantly

    def _on_vote(self, msg: dict) -> None:
        if msg["term"] > self.current_term:
            self._step_down(msg["term"])
        granted = False
        if (
            self.voter
            and msg["term"] == self.current_term
            and self.role == FOLLOWER
            and self.voted_for in (None, msg["from"])
            and (msg["last_term"], msg["last_count"]) >= (self.last_log_term(), len(self.log))
        ):
            granted = True
            self.voted_for = msg["from"]
        self._send(msg["from"], {"kind": "vote_resp", "granted": granted})

    def _on_vote_resp(self, msg: dict, now: float) -> None:
        if msg["term"] > self.current_term:
            self._step_down(msg["term"])
            return
        if self.role != CANDIDATE or msg["term"] != self.current_term or not msg["granted"]:
            return
        self.votes.add(msg["from"])
        if len(self.votes) >= self.quorum:
            self._become_leader(now)

    # ------------------------------------------------------------ append flow

    def _send_append(self, peer: str, start: int) -> int:
        entries = self.log[start : start + MAX_APPEND_BATCH]
        self._send(
            peer,
            {
                "kind": "append",
                "prev_count": start,
                "prev_term": self.log[start - 1]["term"] if start > 0 else 0,
                "entries": entries,
                "commit": self.commit_count,
            },
        )
        return start + len(entries)

    def _flush(self, now: float, full: bool = False) -> None:
        for peer in self.peers:
            start = self.next[peer] if full else max(self.sent[peer], self.next[peer])
            if full or start < len(self.log):
                self.sent[peer] = self._send_append(peer, start)
        self._pending_since_flush = 0
        self._next_flush = None

    def _on_append(self, msg: dict, now: float) -> None:
        if msg["term"] < self.current_term:
            self._send(msg["from"], {"kind": "append_resp", "ok": False, "match": 0})
            return
        if msg["term"] > self.current_term or self.role != FOLLOWER:
            self._step_down(msg["term"])
        self.leader_hint = msg["from"]
        self._election_deadline = now + self._election_timeout()

        prev = msg["prev_count"]
        if prev > len(self.log) or (prev > 0 and self.log[prev - 1]["term"] != msg["prev_term"]):
            hint = max(self.commit_count, min(prev - 1, len(self.log)))
            self._send(msg["from"], {"kind": "append_resp", "ok": False, "match": hint})
            return
        for j, entry in enumerate(msg["entries"]):
            pos = prev + j
            if pos < len(self.log):
                if self.log[pos]["term"] == entry["term"]:
                    continue  # already have it
                self._truncate(pos)
            self._append(entry)
        match = prev + len(msg["entries"])
        # Commit may only advance over entries known to match the leader's log
        # (an empty heartbeat must not commit a stale local suffix).
        self._advance_commit_to(min(msg["commit"], match))
        self._send(msg["from"], {"kind": "append_resp", "ok": True, "match": match})

    def _on_append_resp(self, msg: dict) -> None:
        if msg["term"] > self.current_term:
            self._step_down(msg["term"])
            return
        if self.role != LEADER or msg["term"] != self.current_term:
            return
        peer = msg["from"]
        if msg["ok"]:
            self.match[peer] = max(self.match[peer], msg["match"])
            self.next[peer] = max(self.next[peer], msg["match"])
            self.sent[peer] = max(self.sent[peer], self.next[peer])
            self._leader_advance_commit()
        else:
            self.next[peer] = min(self.next[peer], max(msg["match"], 0))
            self.sent[peer] = self.next[peer]

    # ------------------------------------------------------------------ input

    def receive(self, msg: dict, now: float) -> None:
        kind = msg["kind"]
        if kind == "append":
            self._on_append(msg, now)
        elif kind == "append_resp":
            self._on_append_resp(msg)
        elif kind == "vote":
            self._on_vote(msg)
        elif kind == "vote_resp":
            self._on_vote_resp(msg, now)

    def tick(self, now: float) -> None:
        if self.role == LEADER:
            if now >= self._next_signature:
                self._emit_signature(now)
                self._next_signature = now + self.config.signature_interval
            if self._next_flush is not None and now >= self._next_flush:
                self._flush(now)
            if now >= self._next_heartbeat:
                self._flush(now, full=True)
                self._next_heartbeat = now + self.config.heartbeat_interval
        elif now >= self._election_deadline:
            if self.voter:
                self._start_election(now)
            else:
                self._election_deadline = now + self._election_timeout()

    def next_deadline(self) -> float:
        if self.role == LEADER:
            deadlines = [self._next_heartbeat, self._next_signature]
            if self._next_flush is not None:
                deadlines.append(self._next_flush)
            return min(deadlines)
        return self._election_deadline

    # ----------------------------------------------------------- client path

    def handle_client(self, doc: dict, now: float, wall_now: float):
        """Execute one client request.  Returns (result_doc, assigned TxID or
        None).  Mutating requests on non-leaders raise NotLeader; the caller
        forwards instead."""
        if self.role != LEADER and doc["op"] in MUTATING_OPS:
            raise NotLeader(leader=self.leader_hint)
        outcome = self.app.execute(doc, wall_now, self.current_term, self.committed_txid.revision)
        if not outcome.mutating:
            return outcome.result, None
        if self.role != LEADER:
            raise NotLeader(leader=self.leader_hint)
        txid = TxID(self.current_term, self.next_revision)
        entry = self.app.make_entry(txid, doc, outcome)
        self._append(entry)
        if self._pending_since_flush >= self.config.batch_count:
            self._flush(now)
        elif self._next_flush is None:
            self._next_flush = now + self.config.batch_time
        self._leader_advance_commit()
        return outcome.result, txid

    def _emit_signature(self, now: float) -> None:
        if self.app.tree.size < 1:
            return  # nothing to sign yet
        root = self.app.tree.root()
        entry = {
            "kind": "sig",
            "term": self.current_term,
            "node": self.node_id,
            "covers": self.last_leaf_txid,
            "root": root,
            "leaf_count": self.app.tree.size,
            "signature": certs.sign(self.signing_key, root),
        }
        self._append(entry)
        self._flush(now)
        self._leader_advance_commit()

    # ---------------------------------------------------------------- queries

    def _log_term_at_revision(self, revision: int):
        pos = self.rev_index.get(revision)
        return self.log[pos]["term"] if pos is not None else None

    def _committed_owner(self, revision: int):
        owner = None
        for term, start in self.committed_markers:
            if start <= revision:
                owner = term
        return owner

    def tx_status(self, txid: TxID) -> TxStatus:
        """Classify a transaction ID from this node's view.

        Invalid is only ever derived from committed evidence (a committed
        transaction occupying the revision in another term, or a committed
        term marker proving no such term can reach it), so terminal statuses
        never regress.
        """
        term, revision = txid.term, txid.revision
        if revision == 0:
            return TxStatus.COMMITTED if term == 0 else TxStatus.INVALID
        if term <= 0 or revision < 0:
            return TxStatus.INVALID
        if revision <= self.committed_txid.revision:
            return TxStatus.COMMITTED if self._log_term_at_revision(revision) == term else TxStatus.INVALID
        local_term = self._log_term_at_revision(revision)
        if local_term == term:
            return TxStatus.PENDING
        owner = self._committed_owner(revision)
        if owner is not None and owner > term:
            return TxStatus.INVALID
        if txid in self.discarded:
            return TxStatus.PENDING
        return TxStatus.UNKNOWN

    def term_history(self) -> list:
        """First transaction ID of each term, from the committed prefix."""
        return [TxID(term, start) for term, start in self.committed_markers]

    def get_receipt(self, txid: TxID) -> Receipt:
        if txid.revision < 1 or txid.term < 1:
            raise InvalidTx("only mutating transactions have receipts")
        status = self.tx_status(txid)
        if status == TxStatus.INVALID:
            raise InvalidTx(f"transaction {txid} is invalid")
        if status == TxStatus.UNKNOWN:
            raise NotFound(f"transaction {txid} is unknown here")
        if status == TxStatus.PENDING:
            raise NotYetSignable(f"transaction {txid} is not yet committed")
        entry = self.log[self.rev_index[txid.revision]]
        leaf_index = entry["leaf_index"]
        sig = None
        for leaf_count, pos in self.committed_sigs:
            if leaf_count > leaf_index:
                sig = self.log[pos]
                break
        if sig is None:  # committed status implies a covering signature exists
            raise NotYetSignable(f"no committed signature covers {txid} yet")
        proof = self.app.tree.proof(leaf_index, sig["leaf_count"])
        return Receipt(
            node_id=sig["node"],
            cert=self.app.cert_registry[sig["node"]],
            leaf_components=entry["leaf"],
            proof=proof,
            signature=sig["signature"],
        )
