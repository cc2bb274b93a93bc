"""Seedable 2x64-bit item hash.

Items are hashed with keyed BLAKE2b producing a 16-byte digest; the first
eight bytes (little-endian) give the column hash, the last eight the row hash.
The key is the 64-bit seed in little-endian order, so two sketches built with
the same seed agree on every item.
"""

from __future__ import annotations

import hashlib
from typing import Iterable, Iterator

DEFAULT_SEED = 9001


def hash_pair(item: bytes, seed: int = DEFAULT_SEED) -> tuple[int, int]:
    d = hashlib.blake2b(item, digest_size=16, key=_key(seed)).digest()
    return int.from_bytes(d[:8], "little"), int.from_bytes(d[8:], "little")


def hash_pairs(items: Iterable[bytes], seed: int = DEFAULT_SEED) -> Iterator[tuple[int, int]]:
    key = _key(seed)
    blake = hashlib.blake2b
    for item in items:
        d = blake(item, digest_size=16, key=key).digest()
        yield int.from_bytes(d[:8], "little"), int.from_bytes(d[8:], "little")


def int_item(value: int) -> bytes:
    """Canonical byte form of a 64-bit integer item."""
    return (value & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")


def _key(seed: int) -> bytes:
    return (seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
