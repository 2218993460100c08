"""Request/response JSON shapes.

Every request is normalized into a canonical document: known fields only,
defaults filled in, byte fields base64.  The server executes the normalized
document and the same document is what receipt claims are hashed over, so a
client can rebuild it offline from what it sent.  Unknown request fields are
ignored for wire extensibility.
"""

from __future__ import annotations

import binascii

from lskv import kv
from lskv.types import InvalidArgument, KeyRange, StoredValue, b64d, b64e

# etcd-gateway-style aliases accepted on the wire.
_TARGET_ALIASES = {
    "VERSION": "version",
    "CREATE": "create_revision",
    "MOD": "mod_revision",
    "VALUE": "value",
    "version": "version",
    "create_revision": "create_revision",
    "mod_revision": "mod_revision",
    "value": "value",
}
_RESULT_ALIASES = {
    "EQUAL": "=",
    "GREATER": ">",
    "LESS": "<",
    "=": "=",
    ">": ">",
    "<": "<",
}
_TARGET_OPERANDS = {
    "version": "version",
    "create_revision": "create_revision",
    "mod_revision": "mod_revision",
    "value": "value",
}


def _b64field(obj, name, required=False, default=""):
    raw = obj.get(name)
    if raw is None:
        if required:
            raise InvalidArgument(f"missing field {name!r}")
        return default
    if not isinstance(raw, str):
        raise InvalidArgument(f"field {name!r} must be a base64 string")
    try:
        b64d(raw)
    except (binascii.Error, ValueError) as exc:
        raise InvalidArgument(f"field {name!r} is not valid base64") from exc
    return raw


def _int_field(obj, name, default=0, aliases=()):
    for key in (name,) + tuple(aliases):
        if key in obj:
            value = obj[key]
            if isinstance(value, bool) or not isinstance(value, (int, str)):
                raise InvalidArgument(f"field {name!r} must be an integer")
            try:
                return int(value)
            except ValueError as exc:
                raise InvalidArgument(f"field {name!r} must be an integer") from exc
    return default


def _bool_field(obj, name, default=False):
    value = obj.get(name, default)
    if not isinstance(value, bool):
        raise InvalidArgument(f"field {name!r} must be a boolean")
    return value


def _normalize_put(body: dict) -> dict:
    return {
        "key": _b64field(body, "key", required=True),
        "value": _b64field(body, "value", required=True),
        "lease": _int_field(body, "lease"),
        "prev_kv": _bool_field(body, "prev_kv"),
    }


def _normalize_range(body: dict) -> dict:
    doc = {
        "key": _b64field(body, "key", required=True),
        "limit": _int_field(body, "limit"),
        "count_only": _bool_field(body, "count_only"),
        "revision": _int_field(body, "revision"),
    }
    if "range_end" in body and body["range_end"] is not None:
        doc["range_end"] = _b64field(body, "range_end")
    return doc


def _normalize_delete(body: dict) -> dict:
    doc = {
        "key": _b64field(body, "key", required=True),
        "prev_kv": _bool_field(body, "prev_kv"),
    }
    if "range_end" in body and body["range_end"] is not None:
        doc["range_end"] = _b64field(body, "range_end")
    return doc


def _normalize_compare(c: dict) -> dict:
    if not isinstance(c, dict):
        raise InvalidArgument("compare must be an object")
    target = _TARGET_ALIASES.get(c.get("target"))
    if target is None:
        raise InvalidArgument(f"unknown compare target {c.get('target')!r}")
    result = _RESULT_ALIASES.get(c.get("result", "EQUAL"))
    if result is None:
        raise InvalidArgument(f"unknown compare result {c.get('result')!r}")
    doc = {
        "key": _b64field(c, "key", required=True),
        "target": target,
        "result": result,
    }
    operand_field = _TARGET_OPERANDS[target]
    if target == "value":
        doc["value"] = _b64field(c, "value", required=True)
    else:
        doc[operand_field] = _int_field(c, operand_field)
    return doc


def _normalize_txn_op(op: dict) -> dict:
    if not isinstance(op, dict) or len(op) != 1:
        raise InvalidArgument("transaction op must have exactly one request field")
    kind, body = next(iter(op.items()))
    if kind == "request_put":
        return {"request_put": _normalize_put(body)}
    if kind == "request_range":
        return {"request_range": _normalize_range(body)}
    if kind == "request_delete_range":
        return {"request_delete_range": _normalize_delete(body)}
    if kind == "request_txn":
        from lskv.types import Unimplemented

        raise Unimplemented("nested transactions are not supported")
    raise InvalidArgument(f"unknown transaction op {kind!r}")


def _normalize_txn(body: dict) -> dict:
    return {
        "compare": [_normalize_compare(c) for c in body.get("compare", [])],
        "success": [_normalize_txn_op(o) for o in body.get("success", [])],
        "failure": [_normalize_txn_op(o) for o in body.get("failure", [])],
    }


def normalize_request(op: str, body: dict) -> dict:
    """Canonical request document for execution and claims hashing."""
    if not isinstance(body, dict):
        raise InvalidArgument("request body must be a JSON object")
    if op == "put":
        doc = _normalize_put(body)
    elif op == "range":
        doc = _normalize_range(body)
    elif op == "delete_range":
        doc = _normalize_delete(body)
    elif op == "txn":
        doc = _normalize_txn(body)
    elif op == "lease_grant":
        ttl = body.get("TTL", body.get("ttl"))
        if not isinstance(ttl, (int, float)) or isinstance(ttl, bool):
            raise InvalidArgument("lease grant needs a numeric TTL")
        doc = {"ttl": ttl, "id": _int_field(body, "ID", aliases=("id",))}
    elif op in ("lease_revoke", "lease_keep_alive"):
        doc = {"id": _int_field(body, "ID", aliases=("id",))}
    elif op == "compact":
        doc = {"revision": _int_field(body, "revision")}
    elif op == "set_public_prefix":
        doc = {
            "prefix": _b64field(body, "prefix", required=True),
            "admin_subject": body.get("admin_subject", "admin"),
            "signature": _b64field(body, "signature", required=True),
        }
    else:
        raise InvalidArgument(f"unknown operation {op!r}")
    doc["op"] = op
    return doc


# -- parsed forms for the executor ---------------------------------------------


def key_range_from_doc(doc: dict) -> KeyRange:
    end = doc.get("range_end")
    return KeyRange(b64d(doc["key"]), b64d(end) if end is not None else None)


def compare_from_doc(doc: dict) -> kv.Compare:
    target = doc["target"]
    if target == "value":
        operand = b64d(doc["value"])
    else:
        operand = int(doc.get(_TARGET_OPERANDS[target], 0))
    return kv.Compare(key=b64d(doc["key"]), target=target, op=doc["result"], value=operand)


def txn_op_from_doc(doc: dict):
    kind, body = next(iter(doc.items()))
    if kind == "request_put":
        return kv.PutOp(
            key=b64d(body["key"]),
            value=b64d(body["value"]),
            lease=body["lease"],
            prev_kv=body["prev_kv"],
        )
    if kind == "request_range":
        return kv.RangeOp(
            range=key_range_from_doc(body),
            limit=body["limit"],
            count_only=body["count_only"],
            revision=body["revision"] if body["revision"] else None,
        )
    return kv.DeleteRangeOp(range=key_range_from_doc(body), prev_kv=body["prev_kv"])


# -- response documents ----------------------------------------------------------


def kv_obj(key: bytes, value: StoredValue) -> dict:
    return {
        "key": b64e(key),
        "value": b64e(value.data),
        "create_revision": value.create_revision,
        "mod_revision": value.mod_revision,
        "version": value.version,
        "lease": value.lease,
    }


def range_result_obj(result: kv.RangeResult) -> dict:
    return {
        "kvs": [kv_obj(k, v) for k, v in result.kvs],
        "count": result.count,
    }


def put_result_obj(result: kv.PutResult, key: bytes) -> dict:
    doc = {}
    if result.prev is not None:
        doc["prev_kv"] = kv_obj(key, result.prev)
    return doc


def delete_result_obj(result: kv.DeleteResult) -> dict:
    doc = {"deleted": result.deleted}
    if result.prevs:
        doc["prev_kvs"] = [kv_obj(k, v) for k, v in result.prevs]
    return doc


def txn_result_obj(result: kv.TxnResult, branch_ops: list) -> dict:
    responses = []
    for (kind, res), op_doc in zip(result.responses, branch_ops):
        if kind == "put":
            key = b64d(op_doc["request_put"]["key"])
            responses.append({"response_put": put_result_obj(res, key)})
        elif kind == "range":
            responses.append({"response_range": range_result_obj(res)})
        else:
            responses.append({"response_delete_range": delete_result_obj(res)})
    return {"succeeded": result.succeeded, "responses": responses}
