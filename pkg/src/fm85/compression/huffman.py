"""Canonical Huffman codes."""

from __future__ import annotations

import heapq

import numpy as np

from .bitio import BitReader, CorruptSketchError

MAX_CODE_LENGTH = 60


def code_lengths(weights) -> np.ndarray:
    """Huffman code lengths for positive weights (zero weight -> length 0).

    Ties are broken by symbol order so the result is deterministic.
    """
    w = np.asarray(weights, dtype=np.float64)
    live = np.flatnonzero(w > 0)
    lengths = np.zeros(w.size, dtype=np.int64)
    if live.size == 1:
        lengths[live] = 1
        return lengths
    heap = [(float(w[i]), int(i), [int(i)]) for i in live]
    heapq.heapify(heap)
    tie = w.size
    while len(heap) > 1:
        wa, _, a = heapq.heappop(heap)
        wb, _, b = heapq.heappop(heap)
        for s in a:
            lengths[s] += 1
        for s in b:
            lengths[s] += 1
        heapq.heappush(heap, (wa + wb, tie, a + b))
        tie += 1
    if lengths.max() > MAX_CODE_LENGTH:
        raise ValueError("code too long; raise the probability floor")
    return lengths


class CanonicalCode:
    """Canonical prefix code: codes assigned in (length, symbol) order."""

    def __init__(self, lengths):
        self.lengths = np.asarray(lengths, dtype=np.int64)
        order = sorted(np.flatnonzero(self.lengths).tolist(), key=lambda s: (self.lengths[s], s))
        self.codes = np.zeros(self.lengths.size, dtype=np.uint64)
        self._first: dict[int, tuple[int, int, int]] = {}
        self._symbols = order
        code, prev = 0, 0
        for idx, s in enumerate(order):
            L = int(self.lengths[s])
            code <<= L - prev
            prev = L
            if L not in self._first:
                self._first[L] = (code, idx, 0)
            first_code, first_idx, n = self._first[L]
            self._first[L] = (first_code, first_idx, n + 1)
            self.codes[s] = code
            code += 1
        self._max_len = prev

    @classmethod
    def from_weights(cls, weights) -> "CanonicalCode":
        return cls(code_lengths(weights))

    def encode(self, symbols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        symbols = np.asarray(symbols, dtype=np.int64)
        lens = self.lengths[symbols]
        if np.any(lens == 0):
            raise ValueError("symbol has no code")
        return self.codes[symbols], lens

    def decode_one(self, reader: BitReader) -> int:
        code = 0
        first = self._first
        for L in range(1, self._max_len + 1):
            code = (code << 1) | reader.bit()
            f = first.get(L)
            if f is not None and 0 <= code - f[0] < f[2]:
                return self._symbols[f[1] + code - f[0]]
        raise CorruptSketchError("invalid prefix code")
