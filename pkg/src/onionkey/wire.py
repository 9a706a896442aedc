"""Wire messages for the ``/get-key`` and ``/receive-key-fragment`` endpoints.

Messages are UTF-8 JSON objects with a fixed field order, so ``encode`` is
canonical.  Decoding is strict: unknown fields, missing fields and wrongly
typed fields raise :class:`SchemaError` naming the field.  Semantic rules
(non-empty tagname and so on) belong to the actors, not to this module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from typing import Union
from urllib.parse import urlsplit

from .errors import SchemaError

GET_KEY = "/get-key"
RECEIVE_FRAGMENT = "/receive-key-fragment"


@dataclass(frozen=True)
class KeyRequest:
    """Client -> proxy body of ``POST /get-key``."""

    tagname: str
    key_type: int
    num_of_splits: int
    shuffle: bool
    public_key: str


@dataclass(frozen=True)
class ProxyKeyRequest:
    """Proxy -> QKMS body of ``POST /get-key``: the client request plus channels."""

    tagname: str
    key_type: int
    num_of_splits: int
    shuffle: bool
    public_key: str
    channels: tuple[str, ...]

    @classmethod
    def from_client(cls, req: KeyRequest, channels) -> "ProxyKeyRequest":
        return cls(req.tagname, req.key_type, req.num_of_splits, req.shuffle, req.public_key, tuple(channels))

    def client_part(self) -> KeyRequest:
        return KeyRequest(self.tagname, self.key_type, self.num_of_splits, self.shuffle, self.public_key)


@dataclass(frozen=True)
class FragmentDelivery:
    """One bundle of base64 ciphertexts for ``/receive-key-fragment``."""

    tagname: str
    fragments: tuple[str, ...]
    bundle_id: int


@dataclass(frozen=True)
class KeyAck:
    """Synchronous answer to ``/get-key``; fragments follow asynchronously."""

    tagname: str
    status: str


Message = Union[KeyRequest, ProxyKeyRequest, FragmentDelivery, KeyAck]

_SCHEMAS: dict[type, dict[str, type]] = {
    KeyRequest: {"tagname": str, "key_type": int, "num_of_splits": int, "shuffle": bool, "public_key": str},
    ProxyKeyRequest: {"tagname": str, "key_type": int, "num_of_splits": int, "shuffle": bool,
                      "public_key": str, "channels": list},
    FragmentDelivery: {"tagname": str, "fragments": list, "bundle_id": int},
    KeyAck: {"tagname": str, "status": str},
}


def valid_channel(address: str) -> bool:
    try:
        parts = urlsplit(address)
        return parts.scheme in ("http", "https") and bool(parts.hostname) and parts.port is not None
    except ValueError:
        return False


def _check_value(name: str, value, expected: type) -> None:
    # bool is an int subclass; keep the two apart
    if expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise SchemaError(name, f"expected {expected.__name__}, got {type(value).__name__}")


def validate(msg: Message) -> None:
    schema = _SCHEMAS.get(type(msg))
    if schema is None:
        raise SchemaError("<message>", f"unsupported message type {type(msg).__name__}")
    for name, expected in schema.items():
        value = getattr(msg, name)
        if expected is list:
            if not isinstance(value, (list, tuple)):
                raise SchemaError(name, "expected list")
            for item in value:
                _check_value(name, item, str)
        else:
            _check_value(name, value, expected)
    if isinstance(msg, (KeyRequest, ProxyKeyRequest)):
        if msg.key_type <= 0:
            raise SchemaError("key_type", "must be positive")
        if msg.num_of_splits <= 0:
            raise SchemaError("num_of_splits", "must be positive")
    if isinstance(msg, ProxyKeyRequest):
        if not msg.channels:
            raise SchemaError("channels", "must be non-empty")
        for ch in msg.channels:
            if not valid_channel(ch):
                raise SchemaError("channels", f"malformed channel address {ch!r}")
    if isinstance(msg, FragmentDelivery):
        if not msg.fragments:
            raise SchemaError("fragments", "must be non-empty")
        if msg.bundle_id < 0:
            raise SchemaError("bundle_id", "must be non-negative")


def to_dict(msg: Message) -> dict:
    validate(msg)
    out = {}
    for f in fields(msg):
        value = getattr(msg, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def encode(msg: Message) -> bytes:
    return json.dumps(to_dict(msg), separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def dumps_pretty(msg: Message) -> str:
    return json.dumps(to_dict(msg), indent=2, ensure_ascii=False)


def _guess_type(obj: dict) -> type:
    if "channels" in obj:
        return ProxyKeyRequest
    if "fragments" in obj or "bundle_id" in obj:
        return FragmentDelivery
    if "status" in obj:
        return KeyAck
    return KeyRequest


def from_dict(obj, message_type: type | None = None) -> Message:
    if not isinstance(obj, dict):
        raise SchemaError("<message>", "expected a JSON object")
    message_type = message_type or _guess_type(obj)
    schema = _SCHEMAS[message_type]
    for name in obj:
        if name not in schema:
            raise SchemaError(name, "unknown field")
    for name in schema:
        if name not in obj:
            raise SchemaError(name, "missing field")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
    msg = message_type(**values)
    validate(msg)
    return msg


def decode(data: bytes, message_type: type | None = None) -> Message:
    """Parse ``data``; without ``message_type`` the kind is inferred from its fields."""
    try:
        obj = json.loads(data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError("<message>", f"not valid UTF-8 JSON: {exc}") from exc
    return from_dict(obj, message_type)
