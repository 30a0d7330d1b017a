"""Deterministic seed derivation.

All randomness in a run flows from one master seed. Component streams are
derived as ``master XOR stable_hash(component_name)`` where ``stable_hash``
is the first 8 bytes of SHA-256 of the UTF-8 name, read little-endian,
truncated to 63 bits so the result is a valid numpy seed.
"""

from __future__ import annotations

import hashlib

_MASK = (1 << 63) - 1


def stable_hash(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _MASK


def split_seed(master: int, name: str) -> int:
    return (int(master) ^ stable_hash(name)) & _MASK
