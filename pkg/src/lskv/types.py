"""Core domain types shared across the store, consensus, and client layers."""

from __future__ import annotations

import base64
import enum
import json
from dataclasses import dataclass, field
from typing import Optional


def b64e(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64d(text: str) -> bytes:
    """Strict canonical base64: round-trips exactly (no padding/trailing-bit
    malleability), so byte fields have one spelling everywhere a digest or
    signature covers them."""
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    if base64.b64encode(raw).decode("ascii") != text:
        raise ValueError("non-canonical base64")
    return raw


def hexd(text: str) -> bytes:
    """Strict lowercase hex with the same canonicality guarantee."""
    raw = bytes.fromhex(text)
    if raw.hex() != text:
        raise ValueError("non-canonical hex")
    return raw


def canonical_json(obj) -> bytes:
    """Deterministic JSON: sorted keys, no insignificant whitespace, ASCII-escaped.

    Used everywhere a digest is taken over structured data, so the server and
    an offline verifier always hash identical bytes.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass(frozen=True, order=True)
class TxID:
    """Identifier of a mutating transaction: (raft term, global revision)."""

    term: int
    revision: int

    def as_list(self) -> list:
        return [self.term, self.revision]

    @classmethod
    def from_list(cls, pair) -> "TxID":
        return cls(int(pair[0]), int(pair[1]))

    def __str__(self) -> str:
        return f"{self.term}.{self.revision}"


GENESIS = TxID(0, 0)


@dataclass
class StoredValue:
    """A value as held in the store's map layer.

    Revision fields may lag reality by one update: a freshly created value
    carries create_revision = mod_revision = 0 and the previous writer's
    revision thereafter, because a transaction's ID is only assigned after its
    effects are computed.  ``resolve_revisions`` closes the gap at read time.
    """

    data: bytes
    create_revision: int = 0
    mod_revision: int = 0
    version: int = 1
    lease: int = 0

    def to_obj(self) -> dict:
        return {
            "data": b64e(self.data),
            "create_revision": self.create_revision,
            "mod_revision": self.mod_revision,
            "version": self.version,
            "lease": self.lease,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "StoredValue":
        return cls(
            data=b64d(obj["data"]),
            create_revision=int(obj.get("create_revision", 0)),
            mod_revision=int(obj.get("mod_revision", 0)),
            version=int(obj.get("version", 1)),
            lease=int(obj.get("lease", 0)),
        )

    def copy(self) -> "StoredValue":
        return StoredValue(self.data, self.create_revision, self.mod_revision, self.version, self.lease)


# Range end sentinel: all keys >= start.
OPEN_END = b"\x00"


@dataclass(frozen=True)
class KeyRange:
    """[start, end) over byte-string keys.

    end=None selects the single key ``start``; end=b"\\x00" selects every key
    >= start; otherwise start < end is required.
    """

    start: bytes
    end: Optional[bytes] = None

    def validate(self) -> None:
        if self.end is None:
            if not self.start:
                raise InvalidArgument("empty key")
            return
        if self.end == OPEN_END:
            return
        if not self.start or self.start >= self.end:
            raise InvalidArgument("invalid range: start must be < end")

    def contains(self, key: bytes) -> bool:
        if self.end is None:
            return key == self.start
        if key < self.start:
            return False
        if self.end == OPEN_END:
            return True
        return key < self.end

    def to_obj(self) -> dict:
        obj = {"key": b64e(self.start)}
        if self.end is not None:
            obj["range_end"] = b64e(self.end)
        return obj

    @classmethod
    def from_obj(cls, obj: dict) -> "KeyRange":
        end = obj.get("range_end")
        return cls(b64d(obj["key"]), b64d(end) if end is not None else None)


class TxStatus(enum.Enum):
    """Lifecycle of a transaction ID as seen from one node.

    Committed and Invalid are terminal.
    """

    UNKNOWN = "Unknown"
    PENDING = "Pending"
    COMMITTED = "Committed"
    INVALID = "Invalid"

    @property
    def terminal(self) -> bool:
        return self in (TxStatus.COMMITTED, TxStatus.INVALID)


@dataclass
class Lease:
    """A time-to-live lease; expiry moves forward only via keep-alives."""

    id: int
    granted_ttl: float
    expiry: float
    attached_keys: set = field(default_factory=set)

    def expired(self, now: float) -> bool:
        return now >= self.expiry

    def to_obj(self) -> dict:
        return {"id": self.id, "granted_ttl": self.granted_ttl, "expiry": self.expiry}

    @classmethod
    def from_obj(cls, obj: dict) -> "Lease":
        return cls(int(obj["id"]), float(obj["granted_ttl"]), float(obj["expiry"]))


# Write-set spaces: user keys, lease records, governance records.
SPACE_KV = "k"
SPACE_LEASE = "l"
SPACE_GOV = "g"


@dataclass
class WriteSet:
    """Effects of one mutating transaction: new values or tombstones per key.

    A deterministic function of (pre-state, request); followers replay write
    sets rather than re-executing requests, so anything clock- or
    leader-dependent is resolved before the write set is built.
    """

    kv: dict = field(default_factory=dict)  # bytes -> StoredValue | None
    leases: dict = field(default_factory=dict)  # int -> Lease | None
    gov: dict = field(default_factory=dict)  # str -> dict | None
    compact_revision: Optional[int] = None

    def empty(self) -> bool:
        return not self.kv and not self.leases and not self.gov and self.compact_revision is None

    def written_keys(self) -> list:
        """Space-tagged key bytes, sorted; the input to the write-set digest."""
        keys = [SPACE_KV.encode() + k for k in self.kv]
        keys += [SPACE_LEASE.encode() + str(i).encode() for i in self.leases]
        keys += [SPACE_GOV.encode() + g.encode() for g in self.gov]
        return sorted(keys)

    def to_obj(self) -> dict:
        return {
            "kv": [
                [b64e(k), v.to_obj() if v is not None else None]
                for k, v in sorted(self.kv.items())
            ],
            "leases": [
                [i, l.to_obj() if l is not None else None]
                for i, l in sorted(self.leases.items())
            ],
            "gov": [[g, rec] for g, rec in sorted(self.gov.items())],
            "compact_revision": self.compact_revision,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "WriteSet":
        ws = cls()
        for k, v in obj.get("kv", []):
            ws.kv[b64d(k)] = StoredValue.from_obj(v) if v is not None else None
        for i, l in obj.get("leases", []):
            ws.leases[int(i)] = Lease.from_obj(l) if l is not None else None
        for g, rec in obj.get("gov", []):
            ws.gov[g] = rec
        cr = obj.get("compact_revision")
        ws.compact_revision = int(cr) if cr is not None else None
        return ws


@dataclass(frozen=True)
class WatchEvent:
    kind: str  # "put" | "delete"
    key: bytes
    value: Optional[StoredValue]
    txid: TxID

    def to_obj(self) -> dict:
        obj = {"kind": self.kind, "key": b64e(self.key), "txid": self.txid.as_list()}
        if self.value is not None:
            obj["value"] = self.value.to_obj()
        return obj

    @classmethod
    def from_obj(cls, obj: dict) -> "WatchEvent":
        val = obj.get("value")
        return cls(
            kind=obj["kind"],
            key=b64d(obj["key"]),
            value=StoredValue.from_obj(val) if val is not None else None,
            txid=TxID.from_list(obj["txid"]),
        )


@dataclass
class ResponseHeader:
    cluster_id: str
    member_id: str
    raft_term: int
    revision: int
    committed_raft_term: int
    committed_revision: int

    def to_obj(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "member_id": self.member_id,
            "raft_term": self.raft_term,
            "revision": self.revision,
            "committed_raft_term": self.committed_raft_term,
            "committed_revision": self.committed_revision,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "ResponseHeader":
        return cls(
            cluster_id=obj["cluster_id"],
            member_id=obj["member_id"],
            raft_term=int(obj["raft_term"]),
            revision=int(obj["revision"]),
            committed_raft_term=int(obj["committed_raft_term"]),
            committed_revision=int(obj["committed_revision"]),
        )

    @property
    def committed(self) -> TxID:
        return TxID(self.committed_raft_term, self.committed_revision)


class LSKVError(Exception):
    """Base for all store errors carried over the wire as {code, message}."""

    code = "Internal"
    http_status = 500

    def to_obj(self) -> dict:
        return {"error": {"code": self.code, "message": str(self)}}


class InvalidArgument(LSKVError):
    code = "InvalidArgument"
    http_status = 400


class Unimplemented(LSKVError):
    code = "Unimplemented"
    http_status = 501


class LeaseNotFound(LSKVError):
    code = "LeaseNotFound"
    http_status = 404


class LeaseExists(LSKVError):
    code = "LeaseExists"
    http_status = 409


class CompactedError(LSKVError):
    code = "Compacted"
    http_status = 400


class FutureRevision(LSKVError):
    code = "FutureRevision"
    http_status = 400


class NotLeader(LSKVError):
    code = "NotLeader"
    http_status = 503

    def __init__(self, message: str = "not leader", leader: Optional[str] = None):
        super().__init__(message)
        self.leader = leader

    def to_obj(self) -> dict:
        obj = super().to_obj()
        obj["error"]["leader"] = self.leader
        return obj


class Unavailable(LSKVError):
    code = "Unavailable"
    http_status = 503


class NotYetSignable(LSKVError):
    code = "NotYetSignable"
    http_status = 202


class InvalidTx(LSKVError):
    code = "InvalidTx"
    http_status = 400


class NotFound(LSKVError):
    code = "NotFound"
    http_status = 404


class Forbidden(LSKVError):
    code = "Forbidden"
    http_status = 403


class OrderingViolation(LSKVError):
    code = "OrderingViolation"
    http_status = 500


class ConfigError(LSKVError):
    code = "ConfigError"
    http_status = 500


ERROR_CLASSES = {
    cls.code: cls
    for cls in (
        InvalidArgument,
        Unimplemented,
        LeaseNotFound,
        LeaseExists,
        CompactedError,
        FutureRevision,
        NotLeader,
        Unavailable,
        NotYetSignable,
        InvalidTx,
        NotFound,
        Forbidden,
        OrderingViolation,
        ConfigError,
    )
}


def error_from_obj(obj: dict) -> LSKVError:
    err = obj.get("error", {})
    cls = ERROR_CLASSES.get(err.get("code"), LSKVError)
    exc = cls(err.get("message", "unknown error"))
    if isinstance(exc, NotLeader):
        exc.leader = err.get("leader")
    return exc
