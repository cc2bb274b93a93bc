"""Cardinality estimators for coupon-collection sketches.

ICON inverts the map ``n -> E(C)``; MDL minimises the description length of
the collected set; HIP reads the running accumulator.  The bitmap and
triple-size-bitmap formulas cover the small-``n`` regime, and the closed-form
error models are kept here so tests can compare simulation against them.

Most functions take ``k`` and ``max_col`` directly rather than a sketch so
that they also apply to tiny universes (``k = 1``) used by brute-force tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .coupons import Fm85Sketch, HipUnavailableError

LN2 = math.log(2.0)
ICON_D = 0.7940236
EULER_GAMMA = 0.57721566490153286061
MDL_N_MAX = 2.0 ** 62
HARMONIC_SWITCH = 10 ** 6


@dataclass(frozen=True)
class EstimatorConstants:
    L: float = LN2
    D: float = ICON_D


@dataclass(frozen=True)
class HipVarianceModel:
    x: float
    V: float


def column_probabilities(k: int, max_col: int = 64) -> np.ndarray:
    """Per-cell probabilities ``1/(k 2^j)`` for ``j = 1..max_col``."""
    j = np.arange(1, max_col + 1, dtype=np.float64)
    return 1.0 / (k * np.exp2(j))


def column_rates(k: int, max_col: int = 64) -> np.ndarray:
    """``-log(1 - p_j)``: ``(1 - p_j)^m == exp(-m * rate_j)``."""
    return -np.log1p(-column_probabilities(k, max_col))


def expected_coupons(n, k: int, max_col: int = 64):
    """E(C) after ``n`` draws (vectorised over ``n``)."""
    a = column_rates(k, max_col)
    n = np.asarray(n, dtype=np.float64)
    q = -np.expm1(-np.multiply.outer(n, a))
    out = k * q.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def coupon_count_variance(n, k: int, max_col: int = 64):
    """Var(C) after ``n`` draws: ``k sum_j q_j (1 - q_j)``."""
    a = column_rates(k, max_col)
    n = np.asarray(n, dtype=np.float64)
    x = np.multiply.outer(n, a)
    q = -np.expm1(-x)
    out = k * (q * np.exp(-x)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------- ICON

def _invert_expected(C: np.ndarray, k: int, max_col: int, max_iter: int = 200) -> np.ndarray:
    """Vectorised bisection for ``E(C at m) == C`` in log-space."""
    C = np.asarray(C, dtype=np.float64)
    out = np.zeros(C.shape)
    cap = k * max_col
    if np.any(C > cap) or np.any(C < 0):
        raise ValueError(f"C must lie in [0, {cap}]")
    full = C == cap
    out[full] = math.inf
    todo = (C > 0) & ~full
    if not todo.any():
        return out
    target = C[todo]
    a = column_rates(k, max_col)

    def ec(m):
        return k * (-np.expm1(-m[:, None] * a)).sum(axis=1)

    # E(m) <= m, so m >= C is a valid lower bound
    lo = target.copy()
    hi = np.maximum(2.0 * target, icon_asymptotic(target, k) * 4.0)
    low_hi = ec(hi) < target
    while low_hi.any():
        hi[low_hi] *= 16.0
        low_hi = ec(hi) < target
    # each entry stops on its own test so a value never depends on its batch
    tol = 1e-9 * np.maximum(1.0, target)
    result = np.sqrt(lo * hi)
    live = np.arange(target.size)
    for _ in range(max_iter):
        mid = np.sqrt(lo[live] * hi[live])
        e = ec(mid)
        below = e < target[live]
        lo[live] = np.where(below, mid, lo[live])
        hi[live] = np.where(below, hi[live], mid)
        result[live] = mid
        done = (np.abs(e - target[live]) < tol[live]) | (hi[live] <= lo[live] * (1 + 1e-15))
        live = live[~done]
        if not live.size:
            break
    out[todo] = result
    return out


class IconTable:
    """Lazily filled mapping from collected count ``C`` to the ICON estimate.

    Entries are computed in vectorised batches the first time they are asked
    for and cached; the cache only grows, so concurrent readers see either a
    missing or a final value.
    """

    def __init__(self, k: int, max_col: int = 64):
        self.k = k
        self.max_col = max_col
        self.capacity = k * max_col
        self._values: dict[int, float] = {0: 0.0}

    def __getitem__(self, C: int) -> float:
        C = int(C)
        v = self._values.get(C)
        if v is None:
            self.fill([C])
            v = self._values[C]
        return v

    def fill(self, Cs) -> None:
        Cs = np.unique(np.asarray(Cs, dtype=np.int64))
        missing = np.array([c for c in Cs.tolist() if c not in self._values], dtype=np.int64)
        if missing.size:
            vals = _invert_expected(missing, self.k, self.max_col)
            self._values.update(zip(missing.tolist(), vals.tolist()))

    def lookup(self, Cs) -> np.ndarray:
        Cs = np.asarray(Cs, dtype=np.int64)
        uniq, inv = np.unique(Cs, return_inverse=True)
        self.fill(uniq)
        vals = np.array([self._values[c] for c in uniq.tolist()])
        return vals[inv].reshape(Cs.shape)


@lru_cache(maxsize=64)
def icon_table(k: int, max_col: int = 64) -> IconTable:
    return IconTable(k, max_col)


def icon_estimate(C: int, k: int, max_col: int = 64) -> float:
    if C < 0 or C > k * max_col:
        raise ValueError(f"C={C} beyond table capacity {k * max_col}")
    return icon_table(k, max_col)[C]


def icon_asymptotic(C, k: int):
    return ICON_D * k * np.exp(LN2 * np.asarray(C, dtype=np.float64) / k)


def icon_error_model(k: int) -> tuple[float, float, float]:
    """(bias/n, sigma/n, rmse/n) to leading order in 1/k."""
    return LN2 ** 2 / (2 * k), LN2 / math.sqrt(k), LN2 / math.sqrt(k)


# ----------------------------------------------------------------------- MDL

def description_length_counts(counts, k: int, m: float, max_col: int | None = None) -> float:
    """Description length in bits of a collected set given per-column counts.

    ``counts[j-1]`` is the number of collected coupons in column ``j``.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if max_col is None:
        max_col = counts.size
    a = column_rates(k, max_col)
    x = m * a
    q = -np.expm1(-x)
    with np.errstate(divide="ignore"):
        neg_log_q = -np.log(q)
    hit = counts > 0
    if np.any(hit & (q == 0)):
        return math.inf
    bits = np.where(hit, counts * neg_log_q, 0.0).sum() + ((k - counts) * x).sum()
    return float(bits / LN2)


def description_length(sketch: Fm85Sketch, m: float) -> float:
    if m < 1:
        raise ValueError("m must be >= 1")
    cfg = sketch.config
    return description_length_counts(sketch.column_counts()[1:], cfg.k, m, cfg.max_col)


def golden_minimize(f: Callable[[float], float], start: float, m_max: float = MDL_N_MAX) -> float:
    """Minimise a unimodal ``f`` over integers in ``[1, m_max]``.

    The bracket grows geometrically from ``start``; golden-section search then
    shrinks it until at most 8 integers remain, which are scanned directly.
    Above roughly 2**50 doubles cannot separate neighbouring integers, so
    the final scan is replaced by rounding the bracket midpoint.
    """
    b = min(max(float(start), 1.0), m_max)
    fb = f(b)
    a, c = max(b / 2, 1.0), min(b * 2, m_max)
    fa, fc = f(a), f(c)
    while fa < fb and a > 1.0:
        c, fc, b, fb = b, fb, a, fa
        a = max(a / 2, 1.0)
        fa = f(a)
    while fc < fb and c < m_max:
        a, fa, b, fb = b, fb, c, fc
        c = min(c * 2, m_max)
        fc = f(c)
    invphi = (math.sqrt(5) - 1) / 2
    lo, hi = a, c
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    f1, f2 = f(x1), f(x2)
    for _ in range(400):
        if hi - lo <= 8 or hi - lo <= 1e-14 * hi:
            break
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2 = f(x2)
    if hi - lo > 8:
        return float(round((lo + hi) / 2))
    cands = range(max(1, math.floor(lo)), min(math.ceil(hi), int(m_max)) + 1)
    best, fbest = None, math.inf
    for m in cands:
        fm = f(float(m))
        if fm < fbest:
            best, fbest = m, fm
    return float(best)


def mdl_estimate_counts(counts, k: int, max_col: int | None = None) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    if max_col is None:
        max_col = counts.size
    C = counts.sum()
    if C == 0:
        return 0.0
    try:
        start = _invert_expected(np.array([min(C, k * max_col - 1)]), k, max_col)[0]
    except ValueError:
        start = 1.0
    return golden_minimize(lambda m: description_length_counts(counts, k, m, max_col), start)


def mdl_estimate(sketch: Fm85Sketch) -> float:
    cfg = sketch.config
    if sketch.collected_count == 0:
        return 0.0
    return mdl_estimate_counts(sketch.column_counts()[1:], cfg.k, cfg.max_col)


def solve_convex_mdl(lin: np.ndarray, weights: np.ndarray, rates: np.ndarray,
                     start: np.ndarray, iters: int = 60, integer: bool = True) -> np.ndarray:
    """Batched minimiser of ``m*lin + sum_j w_j * -log(1 - exp(-m a_j))``.

    Both the FM85 and HLL description lengths have this form.  The
    objective is convex in ``m``; its derivative
    ``lin - sum_j w_j a_j / expm1(m a_j)`` is increasing, so the root is
    found by bisection in ``log m``.  With ``integer`` the better of the two
    neighbouring integers is returned.  Rows with no weight return 0.
    """
    lin = np.asarray(lin, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    out = np.zeros(lin.shape)
    active = weights.sum(axis=1) > 0
    if not active.any():
        return out
    lin = lin[active]
    wa = weights[active] * rates

    def grad(m, rows=slice(None)):
        with np.errstate(over="ignore"):
            return lin[rows] - (wa[rows] / np.expm1(m[:, None] * rates)).sum(axis=1)

    def cost(m):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -np.log(-np.expm1(-m[:, None] * rates))
        return m * lin + np.where(wa > 0, weights[active] * t, 0.0).sum(axis=1)

    start = np.maximum(np.asarray(start, dtype=np.float64)[active], 1.0)
    lo, hi = start / 8, start * 8
    for bound, sign, step in ((lo, 1, 1 / 8), (hi, -1, 8)):
        bad = np.flatnonzero(sign * grad(bound) > 0)
        while bad.size:
            bound[bad] *= step
            ok = (bound[bad] <= 1e-300) | (bound[bad] >= MDL_N_MAX)
            bad = bad[~ok]
            if bad.size:
                bad = bad[sign * grad(bound[bad], bad) > 0]
    for _ in range(iters):
        mid = np.sqrt(lo * hi)
        pos = grad(mid) > 0
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
    m = np.minimum(np.sqrt(lo * hi), MDL_N_MAX)
    if integer:
        down = np.maximum(np.floor(m), 1.0)
        up = np.maximum(np.ceil(m), 1.0)
        m = np.where(cost(up) < cost(down), up, down)
    out[active] = m
    return out


# ----------------------------------------------------------------------- HIP

def hip_estimate(sketch) -> float:
    if not sketch.hip_valid:
        raise HipUnavailableError("HIP state does not survive merging")
    return sketch.hip_accumulator


def hip_variance_conjecture(n: float, k: int) -> HipVarianceModel:
    x = 2.0 ** (-1.0 / k)
    # (1-x)^2 / (1-x^2) == (1-x)/(1+x) == tanh(ln2 / 2k)
    ratio = math.tanh(LN2 / (2 * k))
    return HipVarianceModel(x=x, V=n * n * ratio - n)


# ------------------------------------------------------- harmonic / bitmaps

@lru_cache(maxsize=1)
def _harmonic_prefix() -> np.ndarray:
    terms = 1.0 / np.arange(1, HARMONIC_SWITCH + 1, dtype=np.longdouble)
    return np.concatenate([[0.0], np.cumsum(terms).astype(np.float64)])


def _harmonic_asymptotic(i):
    i = np.asarray(i, dtype=np.float64)
    return np.log(i) + EULER_GAMMA + 1 / (2 * i) - 1 / (12 * i * i)


def harmonic(i):
    """H(i); direct sums up to 10**6, asymptotic expansion beyond."""
    arr = np.asarray(i)
    if np.any(arr < 0):
        raise ValueError("harmonic numbers need i >= 0")
    prefix = _harmonic_prefix()
    small = arr <= HARMONIC_SWITCH
    if arr.ndim == 0:
        return float(prefix[int(arr)]) if small else float(_harmonic_asymptotic(arr))
    out = np.empty(arr.shape)
    out[small] = prefix[arr[small].astype(np.int64)]
    out[~small] = _harmonic_asymptotic(arr[~small])
    return out


def bitmap_estimate(C, k: int):
    C = np.asarray(C)
    if np.any(C < 0) or np.any(C > k):
        raise ValueError(f"bitmap estimate needs 0 <= C <= {k}")
    out = k * (harmonic(k) - harmonic(k - C))
    return float(out) if np.ndim(out) == 0 else out


def tsbm_estimate(C, k: int):
    C = np.asarray(C)
    if np.any(C < 0) or np.any(C > 3 * k):
        raise ValueError(f"TSBM estimate needs 0 <= C <= {3 * k}")
    out = 3 * k * (harmonic(3 * k) - harmonic(3 * k - C))
    return float(out) if np.ndim(out) == 0 else out
