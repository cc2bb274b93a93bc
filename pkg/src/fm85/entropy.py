"""Entropy of FM85 and HLL sketches.

For ``n = c k 2^b`` with large ``b`` a cell at column ``b + d`` is uncollected
with probability ``r_d = exp(-c 2^-d)``.  Summing binary entropies over ``d``
gives the per-row FM85 entropy; weighting each cell by ``r_d`` (the chance HLL
still remembers it) gives the HLL entropy.  Both oscillate with period one in
``log2 c``; the constants are their means.

The ``d`` sum is truncated to ``[-60, 60]``: cells with ``c 2^-d > 45`` or
``< 2^-60`` contribute under ``1e-12`` bits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, NamedTuple

import numpy as np

from .coupons import SketchConfig
from .estimators import column_rates

D_RANGE = np.arange(-60, 61)
Kind = Literal["fm85", "hll"]


class AsymptoticCell(NamedTuple):
    c: float
    d: int


@dataclass(frozen=True)
class EntropyCurve:
    samples: list[tuple[float, float]]
    mean_constant: float


def binary_entropy_from_rate(x):
    """Entropy in bits of a cell whose uncollected probability is ``exp(-x)``."""
    x = np.asarray(x, dtype=np.float64)
    r = np.exp(-x)
    q = -np.expm1(-x)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = r * x / np.log(2) - np.where(q > 0, q * np.log2(np.where(q > 0, q, 1.0)), 0.0)
    h = np.where(x > 0, h, 0.0)
    return float(h) if h.ndim == 0 else h


def cell_uncollected_prob(cell: AsymptoticCell) -> float:
    return float(np.exp(-cell.c * 2.0 ** (-cell.d)))


def fm85_cell_entropy(cell: AsymptoticCell) -> float:
    return binary_entropy_from_rate(cell.c * 2.0 ** (-cell.d))


def _row_terms(c):
    c = np.asarray(c, dtype=np.float64)
    x = np.multiply.outer(c, np.exp2(-D_RANGE.astype(np.float64)))
    return binary_entropy_from_rate(x), np.exp(-x)


def fm85_row_entropy(c):
    h, _ = _row_terms(c)
    out = h.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def hll_row_entropy(c):
    h, r = _row_terms(c)
    out = (h * r).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def entropy_curve(kind: Kind, samples: int = 4096) -> EntropyCurve:
    if samples < 256:
        raise ValueError("need at least 256 samples")
    log2c = np.arange(samples) / samples
    rows = {"fm85": fm85_row_entropy, "hll": hll_row_entropy}[kind](np.exp2(log2c))
    return EntropyCurve(samples=list(zip(log2c.tolist(), rows.tolist())),
                        mean_constant=float(rows.mean()))


def entropy_constant(kind: Kind, samples: int = 4096) -> float:
    """Mean per-row entropy over one period of the oscillation, in bits."""
    return entropy_curve(kind, samples).mean_constant


def cell_entropies(n: float, k: int, max_col: int = 64) -> np.ndarray:
    """Per-column binary entropy of one cell after ``n`` draws (columns 1..max_col)."""
    return binary_entropy_from_rate(n * column_rates(k, max_col))


def universe_entropy(n: float, k: int, max_col: int = 64) -> float:
    if n <= 0:
        return 0.0
    return float(k * cell_entropies(n, k, max_col).sum())


def finite_entropy(n: float, config: SketchConfig) -> float:
    """Entropy in bits of the collected set after ``n`` draws, cells independent."""
    return universe_entropy(n, config.k, config.max_col)
