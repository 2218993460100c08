"""Append-only ledger files and their offline audit.

File format: a sequence of records, each a 4-byte little-endian length followed
by one type byte (0=transaction, 1=signature, 2=governance) and a JSON
payload.  Transaction payloads keep the Merkle leaf components and any
public-prefix writes in plaintext; everything else (full write set, request/
response claims) is sealed with AES-256-GCM under the ledger key, with the
leaf and transaction ID as associated data.  Leaf digests are computed over
plaintext content, so an auditor can replay the tree and check every signature
without the ledger key, and cross-check the sealed content when given it.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from lskv import certs, receipts
from lskv.merkle import LeafComponents, MerkleTree
from lskv.types import LSKVError, TxID, WriteSet, b64d, b64e, canonical_json, hexd

RT_TX = 0
RT_SIGNATURE = 1
RT_GOV = 2

_LEN = struct.Struct("<I")
MAX_RECORD = 64 * 1024 * 1024


class AuditFailure(LSKVError):
    code = "AuditFailure"
    http_status = 400

    def __init__(self, entry_index: int, message: str):
        super().__init__(f"entry {entry_index}: {message}")
        self.entry_index = entry_index


def governance_action_payload(action: str, **fields) -> bytes:
    obj = {"action": action}
    obj.update(fields)
    return canonical_json(obj)


# -- record construction ------------------------------------------------------


def _frame(rtype: int, payload: dict) -> bytes:
    body = bytes([rtype]) + canonical_json(payload)
    return _LEN.pack(len(body)) + body


def _seal(ledger_key: bytes, body: bytes, aad: bytes) -> str:
    nonce = os.urandom(12)
    ct = AESGCM(ledger_key).encrypt(nonce, body, aad)
    return b64e(nonce + ct)


def _unseal(ledger_key: bytes, sealed: str, aad: bytes) -> bytes:
    raw = b64d(sealed)
    return AESGCM(ledger_key).decrypt(raw[:12], raw[12:], aad)


def public_section(ws: WriteSet, prefixes: list) -> list:
    out = []
    for key in sorted(ws.kv):
        if any(key.startswith(p) for p in prefixes):
            value = ws.kv[key]
            out.append([b64e(key), value.to_obj() if value is not None else None])
    return out


def build_record(entry: dict, ledger_key: bytes, prefixes: list) -> bytes:
    """Serialize one log entry into its ledger record."""
    kind = entry["kind"]
    if kind == "tx":
        txid: TxID = entry["txid"]
        leaf: LeafComponents = entry["leaf"]
        aad = canonical_json({"txid": txid.as_list(), "leaf": leaf.to_obj()})
        body = canonical_json({"writes": entry["ws"].to_obj(), "claims": entry["claims"]})
        payload = {
            "txid": txid.as_list(),
            "req_kind": entry["req_kind"],
            "leaf": leaf.to_obj(),
            "public": public_section(entry["ws"], prefixes),
            "sealed": _seal(ledger_key, body, aad),
        }
        return _frame(RT_TX, payload)
    if kind == "sig":
        payload = {
            "node": entry["node"],
            "term": entry["term"],
            "covers": entry["covers"].as_list(),
            "root": entry["root"].hex(),
            "leaf_count": entry["leaf_count"],
            "signature": b64e(entry["signature"]),
        }
        return _frame(RT_SIGNATURE, payload)
    if kind == "gov":
        payload = {
            "gov_kind": "set_public_prefix",
            "txid": entry["txid"].as_list(),
            "prefix": b64e(entry["prefix"]),
            "leaf": entry["leaf"].to_obj(),
            "writes": entry["ws"].to_obj(),
            "claims": entry["claims"],
            "admin_subject": entry["admin_subject"],
            "admin_signature": b64e(entry["admin_signature"]),
        }
        return _frame(RT_GOV, payload)
    if kind == "meta":
        if entry["meta_kind"] == "initial_public_prefix":
            return _frame(RT_GOV, {"gov_kind": "initial_public_prefix", "prefix": b64e(entry["prefix"])})
        payload = {
            "gov_kind": entry["meta_kind"],
            "cert": entry["cert"].to_pem(),
        }
        if "node_id" in entry:
            payload["node_id"] = entry["node_id"]
        return _frame(RT_GOV, payload)
    if kind == "marker":
        payload = {
            "gov_kind": "term_marker",
            "term": entry["term"],
            "next_revision": entry["next_revision"],
        }
        return _frame(RT_GOV, payload)
    raise LSKVError(f"cannot serialize log entry kind {kind!r}")


def decode_record(data: bytes):
    """data: one record without its length prefix -> (rtype, payload dict)."""
    if not data:
        raise ValueError("empty record")
    rtype = data[0]
    if rtype not in (RT_TX, RT_SIGNATURE, RT_GOV):
        raise ValueError(f"unknown record type {rtype}")
    return rtype, json.loads(data[1:].decode("utf-8"))


def record_to_entry(rtype: int, payload: dict, ledger_key: Optional[bytes]) -> Optional[dict]:
    """Rebuild an in-memory log entry from a ledger record.

    Transaction entries need the ledger key (the write set is sealed).
    Returns None for records that don't round-trip without it.
    """
    if rtype == RT_TX:
        if ledger_key is None:
            return None
        txid = TxID.from_list(payload["txid"])
        leaf = LeafComponents.from_obj(payload["leaf"])
        aad = canonical_json({"txid": txid.as_list(), "leaf": leaf.to_obj()})
        body = json.loads(_unseal(ledger_key, payload["sealed"], aad))
        return {
            "kind": "tx",
            "term": txid.term,
            "txid": txid,
            "req_kind": payload["req_kind"],
            "ws": WriteSet.from_obj(body["writes"]),
            "leaf": leaf,
            "claims": body["claims"],
        }
    if rtype == RT_SIGNATURE:
        return {
            "kind": "sig",
            "term": int(payload["term"]),
            "node": payload["node"],
            "covers": TxID.from_list(payload["covers"]),
            "root": hexd(payload["root"]),
            "leaf_count": int(payload["leaf_count"]),
            "signature": b64d(payload["signature"]),
        }
    gov_kind = payload["gov_kind"]
    if gov_kind == "set_public_prefix":
        txid = TxID.from_list(payload["txid"])
        return {
            "kind": "gov",
            "term": txid.term,
            "txid": txid,
            "prefix": b64d(payload["prefix"]),
            "leaf": LeafComponents.from_obj(payload["leaf"]),
            "ws": WriteSet.from_obj(payload["writes"]),
            "claims": payload["claims"],
            "admin_subject": payload["admin_subject"],
            "admin_signature": b64d(payload["admin_signature"]),
        }
    if gov_kind in ("node_identity", "admin_identity"):
        entry = {
            "kind": "meta",
            "term": 0,
            "meta_kind": gov_kind,
            "cert": certs.Certificate.from_pem(payload["cert"]),
        }
        if "node_id" in payload:
            entry["node_id"] = payload["node_id"]
        return entry
    if gov_kind == "initial_public_prefix":
        return {
            "kind": "meta",
            "term": 0,
            "meta_kind": "initial_public_prefix",
            "prefix": b64d(payload["prefix"]),
        }
    if gov_kind == "term_marker":
        return {
            "kind": "marker",
            "term": int(payload["term"]),
            "next_revision": int(payload["next_revision"]),
        }
    raise ValueError(f"unknown governance record kind {gov_kind!r}")


# -- file handling -------------------------------------------------------------


class LedgerWriter:
    """Synchronous append/truncate over one ledger file (or memory buffer).

    Tracks per-record offsets so a log-suffix truncation maps directly to a
    file truncation, and tracks which public prefixes were active when each
    record was written so transaction records are built consistently.
    """

    def __init__(self, path: Optional[str] = None, ledger_key: bytes = b"", fileobj=None):
        self.path = path
        self.ledger_key = ledger_key
        if fileobj is not None:
            self._f = fileobj
        else:
            self._f = open(path, "a+b")
            self._f.seek(0, io.SEEK_END)
        self.offsets = []  # byte offset of each record
        self._prefixes = []  # [(record_index, prefix bytes)]

    @property
    def record_count(self) -> int:
        return len(self.offsets)

    def active_prefixes(self) -> list:
        return [p for _, p in self._prefixes]

    def append_entry(self, entry: dict) -> None:
        record = build_record(entry, self.ledger_key, self.active_prefixes())
        if entry["kind"] == "gov":
            # the new prefix applies to records after this one
            self._prefixes.append((len(self.offsets), entry["prefix"]))
        elif entry["kind"] == "meta" and entry["meta_kind"] == "initial_public_prefix":
            self._prefixes.append((len(self.offsets), entry["prefix"]))
        self.offsets.append(self._f.tell())
        self._f.write(record)

    def truncate_to(self, n_records: int) -> None:
        if n_records >= len(self.offsets):
            return
        offset = self.offsets[n_records]
        del self.offsets[n_records:]
        self._prefixes = [(i, p) for i, p in self._prefixes if i < n_records]
        self._f.flush()
        self._f.truncate(offset)
        self._f.seek(offset)

    def flush(self) -> None:
        self._f.flush()

    def close(self) -> None:
        self._f.flush()
        if self.path is not None:
            self._f.close()

    @classmethod
    def resume(cls, ledger_key: bytes, path: Optional[str] = None, fileobj=None):
        """Reopen an existing ledger: returns (writer, entries) where entries
        is the parseable prefix.  The file is truncated to that prefix so new
        appends line up with the reloaded log."""
        writer = cls(path=path, ledger_key=ledger_key, fileobj=fileobj)
        f = writer._f
        f.seek(0)
        entries = []
        offset = 0
        while True:
            start = offset
            head = f.read(4)
            if len(head) < 4:
                break
            (length,) = _LEN.unpack(head)
            if length == 0 or length > MAX_RECORD:
                break
            data = f.read(length)
            if len(data) < length:
                break
            try:
                entry = record_to_entry(*decode_record(data), ledger_key=ledger_key)
            except (ValueError, KeyError, InvalidTag, LSKVError):
                break
            if entry is None:
                break
            offset = start + 4 + length
            writer.offsets.append(start)
            if entry["kind"] == "gov" or (
                entry["kind"] == "meta" and entry["meta_kind"] == "initial_public_prefix"
            ):
                writer._prefixes.append((len(writer.offsets) - 1, entry["prefix"]))
            entries.append(entry)
        f.flush()
        f.truncate(offset)
        f.seek(offset)
        return writer, entries


def read_records(stream) -> list:
    """All (record_index, raw bytes sans length prefix) in a ledger stream.

    A trailing partial record (torn write) is ignored, like any other
    unsigned suffix.
    """
    out = []
    index = 0
    while True:
        head = stream.read(4)
        if len(head) < 4:
            break
        (length,) = _LEN.unpack(head)
        if length == 0 or length > MAX_RECORD:
            raise AuditFailure(index, f"implausible record length {length}")
        data = stream.read(length)
        if len(data) < length:
            break
        out.append(data)
        index += 1
    return out


def read_ledger_file(path: str) -> list:
    with open(path, "rb") as f:
        return read_records(f)


def load_log_from_ledger(path: str, ledger_key: bytes) -> list:
    """Best-effort log reconstruction for a restarting node.  The result is
    advisory: consensus re-validates it entry by entry and never uses it for
    commit decisions."""
    entries = []
    try:
        records = read_ledger_file(path)
    except (OSError, AuditFailure):
        return []
    for raw in records:
        try:
            entry = record_to_entry(*decode_record(raw), ledger_key=ledger_key)
        except (ValueError, KeyError, InvalidTag, LSKVError):
            break  # damaged tail; keep the valid prefix
        if entry is None:
            break
        entries.append(entry)
    return entries


# -- audit ---------------------------------------------------------------------


@dataclass
class AuditReport:
    ok: bool = True
    mode: str = "public"  # "public" or "full" (ledger key supplied)
    records: int = 0
    covered_records: int = 0
    covers_up_to: Optional[TxID] = None
    covered_leaf_count: int = 0
    unsigned_suffix: int = 0
    signature_count: int = 0
    public_write_count: int = 0
    governance_events: list = field(default_factory=list)

    def to_obj(self) -> dict:
        return {
            "ok": self.ok,
            "mode": self.mode,
            "records": self.records,
            "covered_records": self.covered_records,
            "covers_up_to": self.covers_up_to.as_list() if self.covers_up_to else None,
            "covered_leaf_count": self.covered_leaf_count,
            "unsigned_suffix": self.unsigned_suffix,
            "signature_count": self.signature_count,
            "public_write_count": self.public_write_count,
            "governance_events": self.governance_events,
        }


def verify_ledger(
    records: list,
    service_cert: certs.Certificate,
    ledger_key: Optional[bytes] = None,
) -> AuditReport:
    """Full offline audit of a ledger prefix from genesis.

    Recomputes every leaf and every signed root, checks each signature against
    its node's certificate and that certificate's endorsement by the service
    certificate, and (given the ledger key) cross-checks sealed content
    against the plaintext the digests cover.  Raises AuditFailure naming the
    first bad record.
    """
    report = AuditReport(mode="full" if ledger_key is not None else "public")
    tree = MerkleTree()
    leaf_txids = []
    node_certs = {}
    admin_cert = None
    prefixes = []
    last_revision = 0
    marker_term = 0  # term declared by the most recent marker; binds entry terms
    last_sig_index = -1
    saw_tx = False

    for i, raw in enumerate(records):
        report.records = i + 1
        try:
            rtype, payload = decode_record(raw)
        except (ValueError, KeyError) as exc:
            raise AuditFailure(i, f"undecodable record: {exc}") from exc
        try:
            if rtype == RT_TX:
                _audit_tx(
                    report, i, payload, tree, leaf_txids, prefixes, ledger_key, last_revision, marker_term
                )
                last_revision += 1
                saw_tx = True
            elif rtype == RT_SIGNATURE:
                _audit_signature(report, i, payload, tree, leaf_txids, node_certs, marker_term)
                last_sig_index = i
            else:
                gov_kind = payload.get("gov_kind")
                if gov_kind == "set_public_prefix":
                    _audit_gov_tx(
                        report, i, payload, tree, leaf_txids, admin_cert, ledger_key,
                        last_revision, marker_term,
                    )
                    prefixes.append(b64d(payload["prefix"]))
                    last_revision += 1
                    saw_tx = True
                elif gov_kind == "initial_public_prefix":
                    if saw_tx:
                        raise AuditFailure(i, "initial prefix record after transactions")
                    prefixes.append(b64d(payload["prefix"]))
                    report.governance_events.append(
                        {"kind": "initial_public_prefix", "prefix": payload["prefix"]}
                    )
                elif gov_kind in ("node_identity", "admin_identity"):
                    cert = certs.Certificate.from_pem(payload["cert"])
                    if not cert.endorsed_by(service_cert.public_key):
                        raise AuditFailure(i, f"{gov_kind} certificate not endorsed by service")
                    if gov_kind == "node_identity":
                        _require(payload.get("node_id") == cert.subject, i, "node id/cert mismatch")
                        node_certs[cert.subject] = cert
                    else:
                        admin_cert = cert
                    report.governance_events.append({"kind": gov_kind, "subject": cert.subject})
                elif gov_kind == "term_marker":
                    term = int(payload["term"])
                    if term <= marker_term:
                        raise AuditFailure(i, f"term marker {term} not increasing")
                    if int(payload["next_revision"]) != last_revision + 1:
                        raise AuditFailure(i, "term marker revision discontinuity")
                    marker_term = term
                else:
                    raise AuditFailure(i, f"unknown governance kind {gov_kind!r}")
        except AuditFailure:
            raise
        except (ValueError, KeyError, TypeError, InvalidTag, LSKVError) as exc:
            raise AuditFailure(i, f"malformed record: {exc}") from exc

    if last_sig_index >= 0:
        report.covered_records = last_sig_index + 1
        report.unsigned_suffix = len(records) - report.covered_records
    else:
        report.unsigned_suffix = len(records)
    return report


def _require(condition: bool, index: int, message: str) -> None:
    if not condition:
        raise AuditFailure(index, message)


def _check_tx_common(index, txid, leaf, ledger_key, last_revision, ws, claims, marker_term):
    _require(txid.revision == last_revision + 1, index, "revision discontinuity")
    _require(marker_term > 0, index, "transaction before any term marker")
    _require(txid.term == marker_term, index, "transaction term does not match its term marker")
    if ledger_key is not None:
        _require(
            receipts.commit_evidence(ledger_key, txid) == leaf.commit_evidence,
            index,
            "commit evidence mismatch",
        )
    if ws is not None:
        _require(
            receipts.write_set_digest(ws) == leaf.write_set_digest,
            index,
            "write-set digest mismatch",
        )
    if claims is not None:
        _require(
            receipts.claims_digest(claims["request"], claims["response"]) == leaf.claims_digest,
            index,
            "claims digest mismatch",
        )


def _audit_tx(report, index, payload, tree, leaf_txids, prefixes, ledger_key, last_revision, marker_term):
    txid = TxID.from_list(payload["txid"])
    leaf = LeafComponents.from_obj(payload["leaf"])
    ws = claims = None
    if ledger_key is not None:
        aad = canonical_json({"txid": txid.as_list(), "leaf": leaf.to_obj()})
        try:
            body = json.loads(_unseal(ledger_key, payload["sealed"], aad))
        except InvalidTag:
            raise AuditFailure(index, "sealed section fails authenticated decryption")
        ws = WriteSet.from_obj(body["writes"])
        claims = body["claims"]
        _require(
            payload["req_kind"] == claims["request"].get("op"),
            index,
            "request kind does not match recorded claims",
        )
        expected_public = public_section(ws, prefixes)
        _require(payload["public"] == expected_public, index, "public section mismatch")
    else:
        for key_b64, _ in payload["public"]:
            key = b64d(key_b64)
            _require(
                any(key.startswith(p) for p in prefixes),
                index,
                "public section contains a key outside registered prefixes",
            )
    _check_tx_common(index, txid, leaf, ledger_key, last_revision, ws, claims, marker_term)
    report.public_write_count += len(payload["public"])
    tree.append(leaf.leaf_digest())
    leaf_txids.append(txid)


def _audit_gov_tx(report, index, payload, tree, leaf_txids, admin_cert, ledger_key, last_revision, marker_term):
    txid = TxID.from_list(payload["txid"])
    leaf = LeafComponents.from_obj(payload["leaf"])
    ws = WriteSet.from_obj(payload["writes"])
    claims = payload["claims"]
    _require(admin_cert is not None, index, "governance transaction before admin identity")
    action = governance_action_payload("set_public_prefix", prefix=payload["prefix"])
    _require(
        certs.verify(admin_cert.public_key, b64d(payload["admin_signature"]), action),
        index,
        "admin signature does not verify",
    )
    _require(payload["admin_subject"] == admin_cert.subject, index, "admin subject mismatch")
    _require(payload["prefix"] == claims["request"].get("prefix"), index, "prefix/claims mismatch")
    expected_ws = WriteSet(gov={payload["prefix"]: {"prefix": payload["prefix"]}})
    _require(payload["writes"] == expected_ws.to_obj(), index, "governance write set malformed")
    _check_tx_common(index, txid, leaf, ledger_key, last_revision, ws, claims, marker_term)
    tree.append(leaf.leaf_digest())
    leaf_txids.append(txid)
    report.governance_events.append(
        {"kind": "set_public_prefix", "txid": txid.as_list(), "prefix": payload["prefix"]}
    )


def _audit_signature(report, index, payload, tree, leaf_txids, node_certs, marker_term):
    node = payload["node"]
    cert = node_certs.get(node)
    _require(cert is not None, index, f"signature by unknown node {node!r}")
    _require(int(payload["term"]) == marker_term, index, "signature term does not match marker")
    leaf_count = int(payload["leaf_count"])
    _require(1 <= leaf_count <= tree.size, index, "signature covers more leaves than exist")
    root = hexd(payload["root"])
    _require(tree.root(leaf_count) == root, index, "recomputed root does not match")
    _require(
        certs.verify(cert.public_key, b64d(payload["signature"]), root),
        index,
        "root signature does not verify",
    )
    covers = TxID.from_list(payload["covers"])
    _require(covers == leaf_txids[leaf_count - 1], index, "covers_up_to does not match leaf")
    if report.covers_up_to is not None:
        _require(
            covers.revision >= report.covers_up_to.revision,
            index,
            "covered range went backwards",
        )
    report.signature_count += 1
    report.covers_up_to = covers
    report.covered_leaf_count = leaf_count
