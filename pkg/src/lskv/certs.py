"""Key material and certificate envelopes.

Certificates are a self-contained envelope: subject, role, raw Ed25519 public
key, and an endorsement signature by the issuer (the service key endorses node
and admin certificates; the service certificate endorses itself).  Receipts
embed the full envelope so offline verifiers need nothing but the service
certificate.
"""

from __future__ import annotations

import base64
import hashlib
import os
import textwrap
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from lskv.types import ConfigError, b64d, b64e, canonical_json

ARMOR_NAME = "LSKV CERTIFICATE"


def generate_private_key() -> Ed25519PrivateKey:
    return Ed25519PrivateKey.generate()


def private_key_bytes(key: Ed25519PrivateKey) -> bytes:
    from cryptography.hazmat.primitives.serialization import (
        Encoding,
        NoEncryption,
        PrivateFormat,
    )

    return key.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())


def private_key_from_bytes(raw: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(raw)


def public_key_bytes(key: Ed25519PrivateKey) -> bytes:
    from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def sign(key: Ed25519PrivateKey, data: bytes) -> bytes:
    return key.sign(data)


def verify(public_raw: bytes, signature: bytes, data: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_raw).verify(signature, data)
        return True
    except (InvalidSignature, ValueError):
        return False


def key_id(public_raw: bytes) -> str:
    """16-hex-char identifier: truncated SHA-256 of the raw public key."""
    return hashlib.sha256(public_raw).hexdigest()[:16]


@dataclass(frozen=True)
class Certificate:
    subject: str
    kind: str  # "service" | "node" | "admin"
    public_key: bytes
    issuer: str
    signature: bytes

    def signing_payload(self) -> bytes:
        return canonical_json(
            {
                "subject": self.subject,
                "kind": self.kind,
                "public_key": b64e(self.public_key),
                "issuer": self.issuer,
            }
        )

    def endorsed_by(self, issuer_public: bytes) -> bool:
        return verify(issuer_public, self.signature, self.signing_payload())

    def to_obj(self) -> dict:
        return {
            "subject": self.subject,
            "kind": self.kind,
            "public_key": b64e(self.public_key),
            "issuer": self.issuer,
            "signature": b64e(self.signature),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "Certificate":
        return cls(
            subject=obj["subject"],
            kind=obj["kind"],
            public_key=b64d(obj["public_key"]),
            issuer=obj["issuer"],
            signature=b64d(obj["signature"]),
        )

    def to_pem(self) -> str:
        body = base64.b64encode(canonical_json(self.to_obj())).decode("ascii")
        wrapped = "\n".join(textwrap.wrap(body, 64))
        return f"-----BEGIN {ARMOR_NAME}-----\n{wrapped}\n-----END {ARMOR_NAME}-----\n"

    @classmethod
    def from_pem(cls, text: str) -> "Certificate":
        import json

        lines = [l.strip() for l in text.strip().splitlines()]
        if (
            len(lines) < 3
            or lines[0] != f"-----BEGIN {ARMOR_NAME}-----"
            or lines[-1] != f"-----END {ARMOR_NAME}-----"
        ):
            raise ConfigError("not a certificate envelope")
        body = "".join(lines[1:-1])
        try:
            raw = base64.b64decode(body, validate=True)
            if base64.b64encode(raw).decode("ascii") != body:
                raise ValueError("non-canonical base64")
            return cls.from_obj(json.loads(raw))
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"malformed certificate envelope: {exc}") from exc


def issue_certificate(
    subject: str, kind: str, subject_public: bytes, issuer: str, issuer_key: Ed25519PrivateKey
) -> Certificate:
    unsigned = Certificate(subject, kind, subject_public, issuer, b"")
    signature = sign(issuer_key, unsigned.signing_payload())
    return Certificate(subject, kind, subject_public, issuer, signature)


@dataclass
class ClusterKeys:
    """Everything a test or deployment needs to stand up a cluster."""

    service_key: Ed25519PrivateKey
    service_cert: Certificate
    ledger_key: bytes
    admin_key: Ed25519PrivateKey
    admin_cert: Certificate
    node_keys: dict  # node_id -> Ed25519PrivateKey
    node_certs: dict  # node_id -> Certificate


def make_cluster_keys(node_ids: list) -> ClusterKeys:
    service_key = generate_private_key()
    service_pub = public_key_bytes(service_key)
    service_cert = issue_certificate("service", "service", service_pub, "service", service_key)
    admin_key = generate_private_key()
    admin_cert = issue_certificate("admin", "admin", public_key_bytes(admin_key), "service", service_key)
    node_keys, node_certs = {}, {}
    for node_id in node_ids:
        key = generate_private_key()
        node_keys[node_id] = key
        node_certs[node_id] = issue_certificate(
            node_id, "node", public_key_bytes(key), "service", service_key
        )
    return ClusterKeys(
        service_key=service_key,
        service_cert=service_cert,
        ledger_key=os.urandom(32),
        admin_key=admin_key,
        admin_cert=admin_cert,
        node_keys=node_keys,
        node_certs=node_certs,
    )


def write_cluster_keys(keys: ClusterKeys, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)

    def put(name, data):
        with open(os.path.join(out_dir, name), "w") as f:
            f.write(data)

    put("service_cert.pem", keys.service_cert.to_pem())
    put("service_key.b64", b64e(private_key_bytes(keys.service_key)) + "\n")
    put("ledger_key.b64", b64e(keys.ledger_key) + "\n")
    put("admin_cert.pem", keys.admin_cert.to_pem())
    put("admin_key.b64", b64e(private_key_bytes(keys.admin_key)) + "\n")
    for node_id, key in keys.node_keys.items():
        put(f"{node_id}_key.b64", b64e(private_key_bytes(key)) + "\n")
        put(f"{node_id}_cert.pem", keys.node_certs[node_id].to_pem())


def load_private_key_file(path: str) -> Ed25519PrivateKey:
    with open(path) as f:
        return private_key_from_bytes(b64d(f.read().strip()))


def load_cert_file(path: str) -> Certificate:
    with open(path) as f:
        return Certificate.from_pem(f.read())


def load_ledger_key_file(path: str) -> bytes:
    with open(path) as f:
        return b64d(f.read().strip())
