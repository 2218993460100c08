"""Lease management: grants, keep-alives, revocations, and the expiry view.

Leases live on the node-local clock; the clock reading is injected at request
execution so replicas replay identical effects.  Expired leases are only ever
*soft*-deleted (their keys vanish from reads but stay in storage) until a
compaction hard-deletes them, because there is no reliable way to schedule
work between requests.
"""

from __future__ import annotations

from typing import Optional

from lskv.types import InvalidArgument, Lease, LeaseExists, LeaseNotFound, WriteSet


class LeaseTable:
    """All granted leases, live or soft-expired, keyed by ID."""

    def __init__(self):
        self.leases = {}  # id -> Lease

    def get(self, lease_id: int) -> Optional[Lease]:
        return self.leases.get(lease_id)

    def alive(self, lease_id: int, now: float) -> bool:
        lease = self.leases.get(lease_id)
        return lease is not None and not lease.expired(now)

    def expired(self, now: float) -> list:
        return [l for l in sorted(self.leases.values(), key=lambda l: l.id) if l.expired(now)]

    def attach(self, lease_id: int, key: bytes) -> None:
        lease = self.leases.get(lease_id)
        if lease is not None:
            lease.attached_keys.add(key)

    def detach(self, lease_id: int, key: bytes) -> None:
        lease = self.leases.get(lease_id)
        if lease is not None:
            lease.attached_keys.discard(key)

    # -- write-set plumbing --------------------------------------------------

    def snapshot(self, lease_id: int):
        lease = self.leases.get(lease_id)
        if lease is None:
            return None
        return Lease(lease.id, lease.granted_ttl, lease.expiry, set(lease.attached_keys))

    def apply(self, lease_id: int, lease: Optional[Lease]) -> None:
        if lease is None:
            self.leases.pop(lease_id, None)
        else:
            prior = self.leases.get(lease_id)
            attached = prior.attached_keys if prior is not None else set()
            self.leases[lease_id] = Lease(lease.id, lease.granted_ttl, lease.expiry, attached)

    def restore(self, lease_id: int, prior: Optional[Lease]) -> None:
        if prior is None:
            self.leases.pop(lease_id, None)
        else:
            self.leases[lease_id] = prior


def execute_lease_grant(state, ttl: float, requested_id: int, now: float, assign_id):
    """Grant a lease; IDs are unique among live and soft-expired leases."""
    if ttl <= 0:
        raise InvalidArgument("lease ttl must be > 0")
    if requested_id:
        if state.leases.get(requested_id) is not None:
            raise LeaseExists(f"lease {requested_id} already exists")
        lease_id = requested_id
    else:
        lease_id = assign_id()
        while state.leases.get(lease_id) is not None:
            lease_id = assign_id()
    lease = Lease(lease_id, float(ttl), now + float(ttl))
    return lease, WriteSet(leases={lease_id: lease})


def execute_lease_keep_alive(state, lease_id: int, now: float):
    """Refresh a live lease to a full TTL.  Soft-expiry is terminal: a lease
    that has lapsed cannot be resurrected, only re-granted after compaction."""
    lease = state.leases.get(lease_id)
    if lease is None or lease.expired(now):
        raise LeaseNotFound(f"lease {lease_id} not found or expired")
    renewed = Lease(lease.id, lease.granted_ttl, now + lease.granted_ttl)
    return renewed, WriteSet(leases={lease_id: renewed})


def execute_lease_revoke(state, lease_id: int, now: float):
    """Drop a lease and delete its attached keys in the same transaction."""
    lease = state.leases.get(lease_id)
    if lease is None:
        raise LeaseNotFound(f"lease {lease_id} not found")
    ws = WriteSet(leases={lease_id: None})
    revoked = 0
    for key in sorted(lease.attached_keys):
        entry = state.map.get(key)
        if entry is not None and entry[0].lease == lease_id:
            ws.kv[key] = None
            revoked += 1
    return revoked, ws
