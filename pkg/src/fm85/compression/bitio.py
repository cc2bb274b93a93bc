"""MSB-first bit packing helpers."""

from __future__ import annotations

import numpy as np


class CorruptSketchError(ValueError):
    """Raised for malformed, truncated or checksum-failing sketch data."""


def pack_codes(codes: np.ndarray, lengths: np.ndarray) -> tuple[bytes, int]:
    """Concatenate variable-length codes (each < 2**63) into bytes.

    Returns the packed bytes (last byte zero-padded) and the bit count.
    """
    codes = np.asarray(codes, dtype=np.uint64)
    lengths = np.asarray(lengths, dtype=np.int64)
    total = int(lengths.sum())
    if total == 0:
        return b"", 0
    owner = np.repeat(np.arange(lengths.size), lengths)
    starts = np.cumsum(lengths) - lengths
    pos = np.arange(total) - starts[owner]
    shift = (lengths[owner] - 1 - pos).astype(np.uint64)
    bits = ((codes[owner] >> shift) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits).tobytes(), total


class BitReader:
    def __init__(self, data: bytes):
        self._bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8)).tolist()
        self.pos = 0

    def __len__(self) -> int:
        return len(self._bits)

    def bit(self) -> int:
        if self.pos >= len(self._bits):
            raise CorruptSketchError("bitstream exhausted")
        b = self._bits[self.pos]
        self.pos += 1
        return b

    def bits(self, n: int) -> int:
        if self.pos + n > len(self._bits):
            raise CorruptSketchError("bitstream exhausted")
        v = 0
        for b in self._bits[self.pos:self.pos + n]:
            v = (v << 1) | b
        self.pos += n
        return v

    def unary(self) -> int:
        """Count of one bits before the next zero."""
        q = 0
        while self.bit():
            q += 1
        return q

    def check_padding(self) -> None:
        rest = self._bits[self.pos:]
        if len(rest) >= 8 or any(rest):
            raise CorruptSketchError("unexpected trailing bits")
