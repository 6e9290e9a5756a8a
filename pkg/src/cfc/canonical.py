"""Canonical text encoding.

Everything that gets digested, signed or written to a report goes through
:func:`dumps`: JSON with sorted keys, no insignificant whitespace, bytes as
unpadded base64url strings and numbers in shortest round-trip form (integral
floats are written as integers, so ``1`` and ``1.0`` encode identically).
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from typing import Any

_INT_SAFE = 2**53


def b64e(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64d(text: str) -> bytes:
    pad = "=" * (-len(text) % 4)
    return base64.urlsafe_b64decode(text + pad)


def _normalize(obj: Any) -> Any:
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, int):
        return obj
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError(f"non-finite number {obj!r} has no canonical form")
        if obj.is_integer() and abs(obj) < _INT_SAFE:
            return int(obj)
        return obj
    if isinstance(obj, (bytes, bytearray, memoryview)):
        return b64e(bytes(obj))
    if isinstance(obj, dict):
        out = {}
        for k, v in obj.items():
            if not isinstance(k, str):
                raise TypeError(f"canonical object keys must be str, got {type(k).__name__}")
            out[k] = _normalize(v)
        return out
    if isinstance(obj, (list, tuple)):
        return [_normalize(v) for v in obj]
    if hasattr(obj, "to_dict"):
        return _normalize(obj.to_dict())
    # numpy scalars
    if hasattr(obj, "item"):
        return _normalize(obj.item())
    raise TypeError(f"no canonical form for {type(obj).__name__}")


def dumps(obj: Any) -> str:
    return json.dumps(
        _normalize(obj),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    )


def dumpb(obj: Any) -> bytes:
    return dumps(obj).encode("utf-8")


def loads(text: str | bytes) -> Any:
    return json.loads(text)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def digest(obj: Any) -> bytes:
    """SHA-256 of the canonical encoding of ``obj``."""
    return sha256(dumpb(obj))


def key_id(public_key_bytes: bytes) -> bytes:
    """16-byte identifier of a public key: truncated SHA-256 of its raw bytes."""
    return sha256(public_key_bytes)[:16]
