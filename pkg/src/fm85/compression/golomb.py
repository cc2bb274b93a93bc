"""Golomb coding of non-negative gaps."""

from __future__ import annotations

import math

import numpy as np

from .bitio import BitReader


def golomb_parameter(density: float) -> int:
    """``b = round(-1 / log2(1 - rho))``, at least 1."""
    if density <= 0:
        return 1
    if density >= 1:
        return 1
    return max(1, round(-1.0 / math.log2(1.0 - density)))


def _truncated_binary(r: int, b: int) -> tuple[int, int]:
    bits = b.bit_length() - 1 if b & (b - 1) == 0 else b.bit_length()
    cut = (1 << bits) - b
    if r < cut:
        return r, bits - 1
    return r + cut, bits


def golomb_codes(gaps, b: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-gap (code, length): unary quotient then truncated-binary remainder.

    Long quotients are split into 32-bit chunks of unary ones so every code
    fits a 64-bit word.
    """
    codes, lens = [], []
    for g in np.asarray(gaps, dtype=np.int64).tolist():
        q, r = divmod(g, b)
        while q > 32:
            codes.append((1 << 32) - 1)
            lens.append(32)
            q -= 32
        rc, rl = (0, 0) if b == 1 else _truncated_binary(r, b)
        codes.append((((1 << q) - 1) << (rl + 1)) | rc)
        lens.append(q + 1 + rl)
    return np.array(codes, dtype=np.uint64), np.array(lens, dtype=np.int64)


def golomb_decode(reader: BitReader, b: int) -> int:
    q = reader.unary()
    if b == 1:
        return q
    bits = b.bit_length() - 1 if b & (b - 1) == 0 else b.bit_length()
    cut = (1 << bits) - b
    r = reader.bits(bits - 1) if bits > 1 else 0
    if r >= cut:
        r = ((r << 1) | reader.bit()) - cut
    return q * b + r
