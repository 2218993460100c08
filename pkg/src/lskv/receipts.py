"""Write receipts: generation inputs and fully offline verification.

A receipt binds one executed request/response pair to a signed Merkle root:
the claims digest covers the canonical serialization of the request and the
header-less response, the leaf additionally covers the write-set digest and a
commit-evidence string, and the proof folds the leaf to a root signed by a
node whose certificate the service certificate endorses.

Verification runs in three stages, each with its own failure:
ClaimsMismatch, ProofOrSignatureInvalid, UntrustedNode.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import yaml

from lskv import certs, merkle
from lskv.types import LSKVError, TxID, WriteSet, b64d, b64e, canonical_json


class ClaimsMismatch(LSKVError):
    code = "ClaimsMismatch"
    http_status = 400


class ProofOrSignatureInvalid(LSKVError):
    code = "ProofOrSignatureInvalid"
    http_status = 400


class UntrustedNode(LSKVError):
    code = "UntrustedNode"
    http_status = 400


def strip_header(response_doc: dict) -> dict:
    """Responses are hashed without their header: it is filled in after the
    transaction executes and so is never part of the recorded claims."""
    return {k: v for k, v in response_doc.items() if k != "header"}


def claims_digest(request_doc: dict, response_doc: dict) -> bytes:
    payload = canonical_json({"request": request_doc, "response": strip_header(response_doc)})
    return hashlib.sha256(payload).digest()


def write_set_digest(ws: WriteSet) -> bytes:
    """SHA-256 over the sorted, length-prefixed keys written by a transaction."""
    h = hashlib.sha256()
    for key in ws.written_keys():
        h.update(struct.pack("<I", len(key)))
        h.update(key)
    return h.digest()


def commit_evidence(ledger_secret: bytes, txid: TxID) -> str:
    """Per-transaction string unguessable without the ledger secret; its
    presence in a receipt evidences that the transaction reached the ledger."""
    h = hashlib.sha256(
        ledger_secret + txid.term.to_bytes(8, "big") + txid.revision.to_bytes(8, "big")
    ).hexdigest()
    return f"ce:{txid.term}.{txid.revision}:{h}"


@dataclass
class Receipt:
    node_id: str
    cert: certs.Certificate
    leaf_components: merkle.LeafComponents
    proof: list  # [(side, digest bytes)]
    signature: bytes

    def to_obj(self) -> dict:
        return {
            "node_id": self.node_id,
            "cert": self.cert.to_pem(),
            "leaf_components": self.leaf_components.to_obj(),
            "proof": merkle.proof_to_obj(self.proof),
            "signature": b64e(self.signature),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "Receipt":
        return cls(
            node_id=obj["node_id"],
            cert=certs.Certificate.from_pem(obj["cert"]),
            leaf_components=merkle.LeafComponents.from_obj(obj["leaf_components"]),
            proof=merkle.proof_from_obj(obj["proof"]),
            signature=b64d(obj["signature"]),
        )

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_obj(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "Receipt":
        return cls.from_obj(yaml.safe_load(text))


def verify_receipt(
    receipt: Receipt,
    service_cert: certs.Certificate,
    request_doc: dict,
    response_doc: dict,
) -> None:
    """Offline verification; raises the failed stage's error, returns None on
    success.  Performs no network or ledger access."""
    # Stage 1: the claims digest matches the caller's request/response copy.
    computed = claims_digest(request_doc, response_doc)
    if computed != receipt.leaf_components.claims_digest:
        raise ClaimsMismatch("request/response do not match the receipt's claims digest")

    # Stage 2: leaf folds through the proof to a root signed by the embedded cert.
    leaf = receipt.leaf_components.leaf_digest()
    try:
        root = merkle.fold_proof(leaf, receipt.proof)
    except LSKVError as exc:
        raise ProofOrSignatureInvalid(f"malformed proof: {exc}") from exc
    if not certs.verify(receipt.cert.public_key, receipt.signature, root):
        raise ProofOrSignatureInvalid("signature over the recomputed root does not verify")

    # Stage 3: the signing node is trusted by the service.
    if receipt.cert.subject != receipt.node_id:
        raise UntrustedNode("certificate subject does not match the receipt's node id")
    if receipt.cert.kind != "node" or not receipt.cert.endorsed_by(service_cert.public_key):
        raise UntrustedNode("node certificate is not endorsed by the service certificate")
