"""Small deterministic hash helpers used for ids and cache keys."""

from __future__ import annotations

import hashlib

_FNV64_OFFSET = 0xCBF29CE484222325
_FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a over raw bytes."""
    h = _FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV64_PRIME) & _MASK64
    return h


def content_key(text: str) -> bytes:
    """16-byte digest keying an embedding cache record to its source text."""
    return hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
