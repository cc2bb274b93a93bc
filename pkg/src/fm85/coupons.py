"""FM85 coupon universe and the sliding-window sketch.

Coupon ``(row, col)`` has single-draw probability ``1 / (k * 2**col)``.  The
sketch stores an offset, a ``k x 32`` window of indicator bits and a sparse set
of "surprising" coupons to the right of the window.  Every column to the left
of the window is implicitly full.

The HIP remaining probability ``R`` is kept as an exact integer numerator over
``2 ** (log2(k) + max_col)``; all coupon probabilities are dyadic so the
subtraction ``R <- R - p`` never drifts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple

import numpy as np

WINDOW = 32
_WORD_MASK = (1 << WINDOW) - 1


class ConfigMismatchError(ValueError):
    pass


class HipUnavailableError(RuntimeError):
    """Raised when the HIP estimate is requested from a merged sketch."""


@dataclass(frozen=True)
class SketchConfig:
    k: int
    max_col: int = 64

    def __post_init__(self):
        if self.k < 16 or self.k & (self.k - 1):
            raise ValueError(f"k must be a power of two >= 16, got {self.k}")
        if not 1 <= self.max_col <= 64:
            raise ValueError(f"max_col must lie in [1, 64], got {self.max_col}")

    @property
    def log2_k(self) -> int:
        return self.k.bit_length() - 1

    @property
    def unit_bits(self) -> int:
        # probabilities are integers in units of 2**-unit_bits
        return self.log2_k + self.max_col


class CouponId(NamedTuple):
    row: int
    col: int


def coupon_probability(config: SketchConfig, c: CouponId) -> float:
    return 2.0 ** -(config.log2_k + c.col)


def _coupon_units(config: SketchConfig, col: int) -> int:
    return 1 << (config.max_col - col)


def hash_to_coupon(h1: int, h2: int, config: SketchConfig) -> CouponId:
    """Map a pair of 64-bit hashes to a coupon.

    The column is one plus the number of leading zeros of ``h1``, clamped to
    ``max_col``; the row is the low bits of ``h2``.
    """
    col = 65 - (h1 & 0xFFFFFFFFFFFFFFFF).bit_length()
    if col > config.max_col:
        col = config.max_col
    return CouponId(h2 % config.k, col)


def hash_to_coupons(h1: np.ndarray, h2: np.ndarray, config: SketchConfig) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`hash_to_coupon` over uint64 arrays."""
    h1 = np.asarray(h1, dtype=np.uint64)
    h2 = np.asarray(h2, dtype=np.uint64)
    cols = 65 - bit_length64(h1)
    np.minimum(cols, config.max_col, out=cols)
    rows = (h2 & np.uint64(config.k - 1)).astype(np.int64)
    return rows, cols


def bit_length64(x: np.ndarray) -> np.ndarray:
    """Bit length of each uint64 (0 for 0), exact for all 64-bit values."""
    x = np.asarray(x, dtype=np.uint64)
    out = np.zeros(x.shape, dtype=np.int64)
    v = x.copy()
    for shift in (32, 16, 8, 4, 2, 1):
        s = np.uint64(shift)
        big = (v >> s) != 0
        out[big] += shift
        v = np.where(big, v >> s, v)
    out += (v != 0)
    return out


class Fm85Sketch:
    """Sliding-window FM85 sketch with HIP state.

    ``window_offset`` is the matrix column held in window bit 0.  A fresh
    sketch starts at offset 1.  Offset 0 is accepted for compatibility: its
    bit 0 then names the nonexistent column 0 and is never set.
    """

    __slots__ = ("config", "window_offset", "window", "surprising", "collected_count",
                 "_col_ones", "_hip_acc", "_hip_rem", "hip_valid")

    def __init__(self, config: SketchConfig, window_offset: int = 1):
        if window_offset < 0:
            raise ValueError("window_offset must be >= 0")
        self.config = config
        self.window_offset = window_offset
        self.window = np.zeros(config.k, dtype=np.uint32)
        self.surprising: set[CouponId] = set()
        self.collected_count = config.k * max(window_offset - 1, 0)
        self._col_ones = [0] * WINDOW
        self._hip_acc = 0.0
        self._hip_rem = config.k << config.max_col
        self.hip_valid = True
        if window_offset > 1:
            self._hip_rem = self._remaining_units_exact()

    # ------------------------------------------------------------------ state
    @property
    def k(self) -> int:
        return self.config.k

    @property
    def hip_accumulator(self) -> float:
        return self._hip_acc

    @property
    def hip_remaining(self) -> float:
        return self._hip_rem / (1 << self.config.unit_bits)

    @property
    def hip_remaining_units(self) -> int:
        """``R`` as an integer multiple of ``2**-(log2 k + max_col)``."""
        return self._hip_rem

    def collected(self, c: CouponId) -> bool:
        row, col = c
        if col < self.window_offset:
            return True
        w = col - self.window_offset
        if w < WINDOW:
            return bool((int(self.window[row]) >> w) & 1)
        return CouponId(row, col) in self.surprising

    def update(self, row: int, col: int) -> bool:
        """Collect coupon ``(row, col)``; return True if it was novel."""
        cfg = self.config
        if not (0 <= row < cfg.k and 1 <= col <= cfg.max_col):
            raise ValueError(f"invalid coupon ({row}, {col}) for {cfg}")
        if col < self.window_offset:
            return False
        w = col - self.window_offset
        if w < WINDOW:
            word = int(self.window[row])
            if (word >> w) & 1:
                return False
            self.window[row] = word | (1 << w)
            self._col_ones[w] += 1
        else:
            c = CouponId(row, col)
            if c in self.surprising:
                return False
            self.surprising.add(c)
        self.collected_count += 1
        if self.hip_valid:
            self._hip_acc += (1 << cfg.unit_bits) / self._hip_rem
            self._hip_rem -= _coupon_units(cfg, col)
        if w == 0 and self._col_ones[0] == cfg.k:
            self.normalize()
        return True

    def update_many(self, rows: Iterable[int], cols: Iterable[int]) -> int:
        """Apply coupons in order; return the number of novel ones."""
        novel = 0
        for r, c in zip(rows, cols):
            novel += self.update(int(r), int(c))
        return novel

    def normalize(self) -> None:
        """Slide the window right while its leftmost column is full."""
        cfg = self.config
        while self.window_offset == 0 or self._col_ones[0] == cfg.k:
            self._slide()

    def _slide(self) -> None:
        self.window >>= np.uint32(1)
        self._col_ones = self._col_ones[1:] + [0]
        self.window_offset += 1
        entering = self.window_offset + WINDOW - 1
        moved = [c for c in self.surprising if c.col == entering]
        bit = np.uint32(1 << (WINDOW - 1))
        for c in moved:
            self.surprising.discard(c)
            self.window[c.row] |= bit
        self._col_ones[WINDOW - 1] = len(moved)

    def invalidate_hip(self) -> None:
        self.hip_valid = False
        self._hip_acc = float("nan")

    # -------------------------------------------------------------- views
    def window_matrix(self) -> np.ndarray:
        """Window as a ``k x 32`` boolean matrix, column 0 leftmost."""
        shifts = np.arange(WINDOW, dtype=np.uint32)
        return ((self.window[:, None] >> shifts) & 1).astype(bool)

    def explicit_coupons(self, min_col: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Rows and cols of all collected coupons with ``col >= min_col``.

        Implicit left-of-window coupons are included when ``min_col`` reaches
        into that region.
        """
        k = self.config.k
        rows_out, cols_out = [], []
        lo = max(min_col, 1)
        if lo < self.window_offset:
            implicit = np.arange(lo, self.window_offset)
            rows_out.append(np.tile(np.arange(k), implicit.size))
            cols_out.append(np.repeat(implicit, k))
        r, w = np.nonzero(self.window_matrix())
        c = w + self.window_offset
        keep = c >= lo
        rows_out.append(r[keep])
        cols_out.append(c[keep])
        if self.surprising:
            s = np.array(sorted(self.surprising), dtype=np.int64).reshape(-1, 2)
            keep = s[:, 1] >= lo
            rows_out.append(s[keep, 0])
            cols_out.append(s[keep, 1])
        return (np.concatenate(rows_out).astype(np.int64),
                np.concatenate(cols_out).astype(np.int64))

    def iter_collected(self) -> Iterator[CouponId]:
        rows, cols = self.explicit_coupons()
        for r, c in zip(rows.tolist(), cols.tolist()):
            yield CouponId(r, c)

    def column_counts(self) -> np.ndarray:
        """Collected coupons per column; index ``j`` holds column ``j`` (index 0 unused)."""
        cfg = self.config
        counts = np.zeros(cfg.max_col + 1, dtype=np.int64)
        full_hi = min(self.window_offset - 1, cfg.max_col)
        if full_hi >= 1:
            counts[1:full_hi + 1] = cfg.k
        for w in range(WINDOW):
            col = self.window_offset + w
            if 1 <= col <= cfg.max_col:
                counts[col] = self._col_ones[w]
        for c in self.surprising:
            counts[c.col] += 1
        return counts

    def _remaining_units_exact(self) -> int:
        counts = self.column_counts()
        cfg = self.config
        total = cfg.k << cfg.max_col
        for col in range(1, cfg.max_col + 1):
            total -= int(counts[col]) << (cfg.max_col - col)
        return total

    def recompute_remaining(self) -> float:
        """``1 - sum of p over collected coupons``, computed from scratch."""
        return self._remaining_units_exact() / (1 << self.config.unit_bits)

    # ------------------------------------------------------ construction
    @classmethod
    def from_coupons(cls, config: SketchConfig, rows, cols, window_offset: int = 1,
                     hip: bool = True) -> "Fm85Sketch":
        """Build a sketch by collecting coupons in the given order."""
        s = cls(config, window_offset)
        if not hip:
            s.invalidate_hip()
        s.apply_batch(rows, cols)
        return s

    def apply_batch(self, rows, cols) -> int:
        """Collect a batch of coupons in arrival order; return the novel count.

        Equivalent to calling :meth:`update` on each coupon.  Bits are placed
        with numpy; HIP replays only the novel coupons, in order, with exact
        remaining probability.
        """
        cfg = self.config
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.size == 0:
            return 0
        if rows.min() < 0 or rows.max() >= cfg.k or cols.min() < 1 or cols.max() > cfg.max_col:
            raise ValueError("coupon out of range")
        _, first = np.unique(cols * cfg.k + rows, return_index=True)
        first.sort()
        rows, cols = rows[first], cols[first]
        rows, cols = self._drop_collected(rows, cols)
        if self.hip_valid:
            acc = self._hip_acc
            rem = self._hip_rem
            scale = 1 << cfg.unit_bits
            mc = cfg.max_col
            for c in cols.tolist():
                acc += scale / rem
                rem -= 1 << (mc - c)
            self._hip_acc, self._hip_rem = acc, rem
        self._place(rows, cols)
        self.normalize()
        return int(rows.size)

    def _drop_collected(self, rows: np.ndarray, cols: np.ndarray):
        w = cols - self.window_offset
        keep = w >= 0
        inw = keep & (w < WINDOW)
        if inw.any():
            bits = (self.window[rows[inw]] >> w[inw].astype(np.uint32)) & np.uint32(1)
            keep[np.flatnonzero(inw)[bits == 1]] = False
        far = np.flatnonzero(keep & (w >= WINDOW))
        for i in far.tolist():
            if CouponId(int(rows[i]), int(cols[i])) in self.surprising:
                keep[i] = False
        return rows[keep], cols[keep]

    def _place(self, rows: np.ndarray, cols: np.ndarray) -> None:
        # bulk-set bits for coupons known to be uncollected and >= offset
        w = cols - self.window_offset
        inw = w < WINDOW
        if inw.any():
            bits = np.left_shift(np.uint32(1), w[inw].astype(np.uint32))
            np.bitwise_or.at(self.window, rows[inw], bits)
            ones = np.bincount(w[inw], minlength=WINDOW)
            for i in range(WINDOW):
                self._col_ones[i] += int(ones[i])
        for r, c in zip(rows[~inw].tolist(), cols[~inw].tolist()):
            self.surprising.add(CouponId(r, c))
        self.collected_count += int(rows.size)

    @classmethod
    def _from_state(cls, config: SketchConfig, window_offset: int, rows, cols) -> "Fm85Sketch":
        s = cls(config, window_offset)
        s.invalidate_hip()
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        keep = cols >= max(window_offset, 1)
        rows, cols = rows[keep], cols[keep]
        key = np.unique(cols * config.k + rows)
        s._place(key % config.k, key // config.k)
        return s

    @classmethod
    def from_window(cls, config: SketchConfig, window_offset: int, words, surprising,
                    hip_accumulator: float | None = None) -> "Fm85Sketch":
        """Rebuild a sketch from its stored parts.

        ``R`` is recomputed exactly from the collected set; HIP is valid only
        when an accumulator is supplied.
        """
        s = cls(config, window_offset)
        words = np.asarray(words, dtype=np.uint32)
        if words.shape != (config.k,):
            raise ValueError("window must have one word per row")
        usable = min(WINDOW, max(config.max_col - window_offset + 1, 0))
        allowed = (1 << usable) - 1
        if window_offset == 0:
            allowed &= ~1
        if np.any(words & np.uint32(~allowed & _WORD_MASK)):
            raise ValueError("window bits outside the column range")
        s.window = words.copy()
        for w in range(WINDOW):
            s._col_ones[w] = int(np.count_nonzero((words >> np.uint32(w)) & np.uint32(1)))
        for c in surprising:
            if not (0 <= c.row < config.k and window_offset + WINDOW <= c.col <= config.max_col):
                raise ValueError(f"bad surprising coupon {c}")
        s.surprising = set(CouponId(int(c.row), int(c.col)) for c in surprising)
        s.collected_count += sum(s._col_ones) + len(s.surprising)
        if hip_accumulator is None:
            s.invalidate_hip()
        else:
            s._hip_acc = float(hip_accumulator)
            s._hip_rem = s._remaining_units_exact()
        return s

    def copy(self) -> "Fm85Sketch":
        s = Fm85Sketch.__new__(Fm85Sketch)
        s.config = self.config
        s.window_offset = self.window_offset
        s.window = self.window.copy()
        s.surprising = set(self.surprising)
        s.collected_count = self.collected_count
        s._col_ones = list(self._col_ones)
        s._hip_acc = self._hip_acc
        s._hip_rem = self._hip_rem
        s.hip_valid = self.hip_valid
        return s

    def same_collected(self, other: "Fm85Sketch") -> bool:
        if self.config != other.config or self.collected_count != other.collected_count:
            return False
        a = set(zip(*map(np.ndarray.tolist, self.explicit_coupons())))
        b = set(zip(*map(np.ndarray.tolist, other.explicit_coupons())))
        return a == b

    def __eq__(self, other) -> bool:
        if not isinstance(other, Fm85Sketch):
            return NotImplemented
        if (self.config != other.config or self.window_offset != other.window_offset
                or self.collected_count != other.collected_count
                or self.hip_valid != other.hip_valid
                or self.surprising != other.surprising
                or not np.array_equal(self.window, other.window)):
            return False
        if self.hip_valid:
            return self._hip_acc == other._hip_acc and self._hip_rem == other._hip_rem
        return True

    __hash__ = None

    def __repr__(self) -> str:
        return (f"Fm85Sketch(k={self.config.k}, C={self.collected_count}, "
                f"offset={self.window_offset}, surprising={len(self.surprising)}, "
                f"hip_valid={self.hip_valid})")


def merge(a: Fm85Sketch, b: Fm85Sketch) -> Fm85Sketch:
    """Union of the collected sets.  The result carries no HIP state."""
    if a.config != b.config:
        raise ConfigMismatchError(f"cannot merge {a.config} with {b.config}")
    offset = max(a.window_offset, b.window_offset)
    ra, ca = a.explicit_coupons(offset)
    rb, cb = b.explicit_coupons(offset)
    out = Fm85Sketch._from_state(a.config, offset, np.concatenate([ra, rb]), np.concatenate([ca, cb]))
    out.normalize()
    return out
