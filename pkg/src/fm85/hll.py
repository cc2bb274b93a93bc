"""HyperLogLog baseline.

An HLL register holds the rightmost collected column of its row, so an HLL
sketch is the lossy projection of an FM85 sketch.  The raw estimator uses the
usual harmonic mean with ``alpha_k = 0.7213 / (1 + 1.079 / k)`` and hands over
to the bitmap estimator while empty registers remain and the raw value is
below ``5k/2``.
"""

from __future__ import annotations

import math

import numpy as np

from .coupons import (WINDOW, ConfigMismatchError, Fm85Sketch, HipUnavailableError,
                      SketchConfig, hash_to_coupon)
from .estimators import LN2, bitmap_estimate, column_rates, golden_minimize

SPLICE_FACTOR = 2.5


def hll_alpha(k: int) -> float:
    return 0.7213 / (1.0 + 1.079 / k)


class HllSketch:
    __slots__ = ("config", "registers", "_hip_acc", "_hip_rem", "hip_valid")

    def __init__(self, config: SketchConfig):
        self.config = config
        self.registers = np.zeros(config.k, dtype=np.uint8)
        self._hip_acc = 0.0
        self._hip_rem = config.k << config.max_col
        self.hip_valid = True

    @property
    def k(self) -> int:
        return self.config.k

    @property
    def hip_accumulator(self) -> float:
        return self._hip_acc

    @property
    def hip_remaining(self) -> float:
        return self._hip_rem / (1 << self.config.unit_bits)

    def update(self, row: int, col: int) -> bool:
        """Offer coupon ``(row, col)``; return True if the register grew."""
        old = int(self.registers[row])
        if col <= old:
            return False
        if self.hip_valid:
            mc = self.config.max_col
            self._hip_acc += (1 << self.config.unit_bits) / self._hip_rem
            self._hip_rem -= (1 << (mc - old)) - (1 << (mc - col))
        self.registers[row] = col
        return True

    def hll_update(self, h1: int, h2: int) -> bool:
        row, col = hash_to_coupon(h1, h2, self.config)
        return self.update(row, col)

    def invalidate_hip(self) -> None:
        self.hip_valid = False
        self._hip_acc = float("nan")
        self._hip_rem = _remaining_units(self.registers, self.config)

    def register_histogram(self) -> np.ndarray:
        return np.bincount(self.registers, minlength=self.config.max_col + 1)

    def copy(self) -> "HllSketch":
        s = HllSketch(self.config)
        s.registers = self.registers.copy()
        s._hip_acc, s._hip_rem, s.hip_valid = self._hip_acc, self._hip_rem, self.hip_valid
        return s

    def __eq__(self, other) -> bool:
        if not isinstance(other, HllSketch):
            return NotImplemented
        same = self.config == other.config and np.array_equal(self.registers, other.registers)
        if same and self.hip_valid and other.hip_valid:
            same = self._hip_acc == other._hip_acc and self._hip_rem == other._hip_rem
        return same and self.hip_valid == other.hip_valid

    __hash__ = None

    def __repr__(self) -> str:
        return f"HllSketch(k={self.k}, max_register={int(self.registers.max())})"


def _remaining_units(registers: np.ndarray, config: SketchConfig) -> int:
    mc = config.max_col
    hist = np.bincount(registers, minlength=mc + 1)
    return sum(int(h) << (mc - v) for v, h in enumerate(hist.tolist()) if h)


def from_fm85(sketch: Fm85Sketch) -> HllSketch:
    """Project an FM85 sketch onto HLL registers (HIP state is not derivable)."""
    cfg = sketch.config
    out = HllSketch(cfg)
    regs = np.full(cfg.k, max(sketch.window_offset - 1, 0), dtype=np.int64)
    bl = np.zeros(cfg.k, dtype=np.int64)
    w = sketch.window.astype(np.uint64)
    for shift in range(WINDOW):
        bl[(w >> np.uint64(shift)) != 0] = shift + 1
    has = bl > 0
    regs[has] = sketch.window_offset + bl[has] - 1
    for c in sketch.surprising:
        if c.col > regs[c.row]:
            regs[c.row] = c.col
    out.registers = np.minimum(regs, cfg.max_col).astype(np.uint8)
    out.invalidate_hip()
    return out


def merge_hll(a: HllSketch, b: HllSketch) -> HllSketch:
    if a.config != b.config:
        raise ConfigMismatchError(f"cannot merge {a.config} with {b.config}")
    out = HllSketch(a.config)
    out.registers = np.maximum(a.registers, b.registers)
    out.invalidate_hip()
    return out


def hll_raw_estimate(zsum, zeros, k: int):
    """Harmonic-mean estimate with the small-range bitmap splice.

    ``zsum`` is ``sum_rows 2**-register`` and ``zeros`` the number of empty
    registers; both may be arrays.
    """
    zsum = np.asarray(zsum, dtype=np.float64)
    zeros = np.asarray(zeros, dtype=np.int64)
    raw = hll_alpha(k) * k * k / zsum
    splice = (zeros > 0) & (raw < SPLICE_FACTOR * k)
    out = np.where(splice, 0.0, raw)
    if np.any(splice):
        out = np.where(splice, bitmap_estimate(np.where(splice, k - zeros, 0), k), raw)
    return float(out) if out.ndim == 0 else out


def hll_estimate(hll: HllSketch) -> float:
    regs = hll.registers.astype(np.float64)
    zsum = np.exp2(-regs).sum()
    zeros = int(np.count_nonzero(hll.registers == 0))
    return hll_raw_estimate(zsum, zeros, hll.k)


def hll_hip_estimate(hll: HllSketch) -> float:
    if not hll.hip_valid:
        raise HipUnavailableError("HIP state does not survive merging or projection")
    return hll.hip_accumulator


def register_cdf(n, k: int, max_col: int = 64) -> np.ndarray:
    """``P(register <= v)`` for ``v = 0..max_col`` after ``n`` draws, shape ``n.shape + (max_col+1,)``."""
    v = np.arange(max_col + 1)
    x = (np.exp2(-v.astype(np.float64)) - 2.0 ** -max_col) / k
    n = np.asarray(n, dtype=np.float64)
    return np.exp(np.multiply.outer(n, np.log1p(-x)))


def expected_register_sum(n, k: int, max_col: int = 64):
    """Exact ``E[sum_rows 2**-register]`` after ``n`` uniformly hashed draws."""
    F = register_cdf(n, k, max_col)
    pmf = np.diff(F, axis=-1, prepend=0.0)
    out = k * (pmf * np.exp2(-np.arange(max_col + 1.0))).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def register_tail_rates(k: int, max_col: int) -> np.ndarray:
    """``S_v = sum_{j>v} a_j`` for ``v = 0..max_col``: P(register <= v) = exp(-m S_v)."""
    a = column_rates(k, max_col)
    tail = np.concatenate([np.cumsum(a[::-1])[::-1], [0.0]])
    return tail


def register_description_length(hist, k: int, m: float, max_col: int | None = None) -> float:
    """Bits to describe a register histogram under stream length ``m``."""
    hist = np.asarray(hist, dtype=np.float64)
    if max_col is None:
        max_col = hist.size - 1
    a = column_rates(k, max_col)
    S = register_tail_rates(k, max_col)
    nats = m * float((hist * S).sum())
    q = -np.expm1(-m * a)
    hit = hist[1:] > 0
    if np.any(hit & (q == 0)):
        return math.inf
    with np.errstate(divide="ignore"):
        nats += float(np.where(hit, -hist[1:] * np.log(q), 0.0).sum())
    return nats / LN2


def hll_mdl_from_histogram(hist, k: int, max_col: int | None = None) -> float:
    hist = np.asarray(hist, dtype=np.float64)
    if max_col is None:
        max_col = hist.size - 1
    if hist[1:].sum() == 0:
        return 0.0
    regs = np.repeat(np.arange(hist.size), hist.astype(np.int64))
    zsum = np.exp2(-regs.astype(np.float64)).sum()
    start = hll_alpha(k) * k * k / zsum
    return golden_minimize(lambda m: register_description_length(hist, k, m, max_col), start)


def hll_mdl_estimate(hll: HllSketch) -> float:
    return hll_mdl_from_histogram(hll.register_histogram(), hll.k, hll.config.max_col)


def hll_mdl_batch_terms(hists: np.ndarray, k: int, max_col: int):
    """Linear coefficients and weights for :func:`estimators.solve_convex_mdl`."""
    S = register_tail_rates(k, max_col)
    lin = hists @ S
    return lin, hists[:, 1:], column_rates(k, max_col)


__all__ = [
    "HllSketch", "from_fm85", "merge_hll", "hll_estimate", "hll_raw_estimate", "hll_hip_estimate",
    "hll_mdl_estimate", "hll_mdl_from_histogram", "register_description_length", "hll_alpha",
    "register_cdf", "expected_register_sum", "register_tail_rates",
]
