"""Append-only binary Merkle tree over transaction leaves.

Each leaf commits to three components: a digest of the written keys, an
unguessable per-transaction commit-evidence string, and a digest of the
serialized request/response claims.  Roots can be computed for any prefix of
the leaf sequence, so a proof can target the exact tree state that a signature
covered.  Odd nodes promote unchanged to the next level, which makes the root
over n leaves equal to H(root of the largest power-of-two prefix, root of the
rest).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from lskv.types import InvalidArgument, hexd


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class LeafComponents:
    write_set_digest: bytes  # 32 bytes
    commit_evidence: str
    claims_digest: bytes  # 32 bytes

    def leaf_digest(self) -> bytes:
        ce_digest = sha256(self.commit_evidence.encode("utf-8"))
        return sha256(self.write_set_digest + ce_digest + self.claims_digest)

    def to_obj(self) -> dict:
        return {
            "write_set_digest": self.write_set_digest.hex(),
            "commit_evidence": self.commit_evidence,
            "claims_digest": self.claims_digest.hex(),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "LeafComponents":
        return cls(
            write_set_digest=hexd(obj["write_set_digest"]),
            commit_evidence=obj["commit_evidence"],
            claims_digest=hexd(obj["claims_digest"]),
        )


def _pow2_below(n: int) -> int:
    """Largest power of two strictly less than n (n >= 2)."""
    return 1 << (n - 1).bit_length() - 1


def fold_proof(leaf: bytes, steps: list) -> bytes:
    """Fold a leaf digest through proof steps to a root.

    Each step is (side, digest): the given digest is concatenated on the
    stated side of the running value, then hashed.
    """
    cur = leaf
    for side, digest in steps:
        if side == "left":
            cur = sha256(digest + cur)
        elif side == "right":
            cur = sha256(cur + digest)
        else:
            raise InvalidArgument(f"bad proof step side {side!r}")
    return cur


class MerkleTree:
    """Leaf sequence with cached complete subtrees for prefix roots/proofs."""

    def __init__(self):
        self.leaves = []
        self._cache = {}  # (offset, size) -> digest, size a power of two, offset aligned

    @property
    def size(self) -> int:
        return len(self.leaves)

    def append(self, leaf: bytes) -> int:
        self.leaves.append(leaf)
        return len(self.leaves) - 1

    def truncate(self, n: int) -> None:
        if n < len(self.leaves):
            del self.leaves[n:]
            self._cache = {k: v for k, v in self._cache.items() if k[0] + k[1] <= n}

    def _range_root(self, lo: int, hi: int) -> bytes:
        size = hi - lo
        if size == 1:
            return self.leaves[lo]
        aligned = size & (size - 1) == 0 and lo % size == 0
        if aligned:
            cached = self._cache.get((lo, size))
            if cached is not None:
                return cached
        k = _pow2_below(size)
        digest = sha256(self._range_root(lo, lo + k) + self._range_root(lo + k, hi))
        if aligned:
            self._cache[(lo, size)] = digest
        return digest

    def root(self, n: int = None) -> bytes:
        if n is None:
            n = len(self.leaves)
        if n < 1 or n > len(self.leaves):
            raise InvalidArgument(f"no root over {n} of {len(self.leaves)} leaves")
        return self._range_root(0, n)

    def proof(self, index: int, n: int = None) -> list:
        """Inclusion proof for leaf ``index`` within the first ``n`` leaves,
        bottom-up, each step carrying the sibling digest and its side."""
        if n is None:
            n = len(self.leaves)
        if not (0 <= index < n <= len(self.leaves)):
            raise InvalidArgument(f"no proof for leaf {index} in prefix {n}")
        steps = []
        lo, hi = 0, n
        # Walk down to the leaf, collecting siblings top-down, then reverse.
        while hi - lo > 1:
            k = _pow2_below(hi - lo)
            if index < lo + k:
                steps.append(("right", (lo + k, hi)))
                hi = lo + k
            else:
                steps.append(("left", (lo, lo + k)))
                lo = lo + k
        return [(side, self._range_root(a, b)) for side, (a, b) in reversed(steps)]


def proof_to_obj(steps: list) -> list:
    return [{side: digest.hex()} for side, digest in steps]


def proof_from_obj(obj: list) -> list:
    steps = []
    for step in obj:
        if len(step) != 1:
            raise InvalidArgument("malformed proof step")
        side, digest = next(iter(step.items()))
        steps.append((side, hexd(digest)))
    return steps
