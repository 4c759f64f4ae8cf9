"""Small shared helpers: clocks, canonical JSON, identity digests."""

from __future__ import annotations

import hashlib
import json
import time
from typing import Any

SEP = "\x1f"  # unit separator keeps multi-part digests unambiguous


def sha_hex(*parts: str) -> str:
    """Lowercase hex digest of the canonically joined parts."""
    return hashlib.sha256(SEP.join(parts).encode("utf-8")).hexdigest()


def encode_value(value: Any) -> Any:
    """Make a payload value JSON-safe; bytes become a tagged hex object."""
    if isinstance(value, bytes):
        return {"$bytes": value.hex()}
    if isinstance(value, (bool, int, str)) or value is None:
        return value
    raise TypeError(f"unsupported payload value type: {type(value).__name__}")


def decode_value(value: Any) -> Any:
    if isinstance(value, dict) and set(value) == {"$bytes"}:
        return bytes.fromhex(value["$bytes"])
    return value


def encode_payload(payload: Any) -> list[list[Any]]:
    return [[name, encode_value(v)] for name, v in payload]


def decode_payload(raw: Any) -> list[tuple[str, Any]]:
    return [(name, decode_value(v)) for name, v in raw]


def canonical_json(obj: Any) -> str:
    """Deterministic JSON rendering used for hashing and byte-equality."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


TYPE_RANK = {type(None): 0, bool: 1, int: 2, str: 3, bytes: 4}


def order_key(value: Any) -> tuple[int, Any]:
    """Total-order key over the mixed value types a record column may hold."""
    rank = TYPE_RANK.get(type(value))
    if rank is None:
        rank = 5
        value = str(value)
    return (rank, value)


class WallClock:
    def now(self) -> float:
        return time.time()


class VirtualClock:
    """Manually advanced clock; keeps scenario runs fully deterministic."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance(self, seconds: float) -> float:
        self._now += seconds
        return self._now

    def set(self, t: float) -> None:
        if t < self._now:
            raise ValueError("clock cannot move backwards")
        self._now = float(t)
