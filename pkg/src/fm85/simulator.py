"""Accelerated coupon-collection simulation and estimator replay.

Each of the ``M * k`` coupons gets an exponential clock ``E_i / p_i``; sorting
the clocks gives the discovery order.  The number of draws between novel
coupons is Geometric in the uncollected probability, so summing geometric
waits places every discovery on the ``n`` axis at a cost independent of how
far the stream runs.

Stream positions are float64.  At ``n ~ k * 2**80`` consecutive discoveries
are separated by huge waits, so the 53-bit mantissa is far finer than the
gaps that matter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .coupons import CouponId, Fm85Sketch, SketchConfig, hash_to_coupons
from .estimators import (hip_estimate, icon_estimate, icon_table, mdl_estimate,
                         solve_convex_mdl, column_rates)
from .hll import (HllSketch, hll_estimate, hll_hip_estimate, hll_mdl_estimate,
                  hll_mdl_batch_terms, hll_raw_estimate)

ESTIMATORS = ("fm85_icon", "fm85_mdl", "fm85_hip", "hll", "hll_mdl", "hll_hip")
# sketch statistics with exactly known means, usable as control variates
STATISTICS = ("fm85_coupons", "hll_zsum")
_BATCH_CELLS = 1 << 21


@dataclass(frozen=True)
class SimulatorConfig:
    k: int
    num_columns: int = 96
    stop_exponent: int = 80
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.num_columns <= self.stop_exponent + 10:
            raise ValueError("num_columns must exceed stop_exponent + 10")

    @property
    def stop_n(self) -> float:
        return self.k * 2.0 ** self.stop_exponent

    @property
    def universe(self) -> int:
        return self.k * self.num_columns

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def _coupon_tables(k: int, M: int):
    idx = np.arange(k * M)
    cols = idx // k + 1
    rows = idx % k
    p = np.ldexp(1.0 / k, -cols)
    return rows, cols, p


def discovery_order(config: SimulatorConfig, rng: np.random.Generator | None = None):
    """Coupons sorted by exponential clock: returns ``(rows, cols)``."""
    rng = config.rng() if rng is None else rng
    rows, cols, p = _coupon_tables(config.k, config.num_columns)
    clocks = rng.standard_exponential(rows.size) / p
    order = np.argsort(clocks, kind="stable")
    return rows[order], cols[order]


@dataclass(frozen=True)
class TraceBatch:
    """A batch of discovery traces of equal padded length.

    ``n[b, t]`` is the stream position of trial ``b``'s ``t``-th discovery and
    ``remaining[b, t]`` the uncollected probability just before it.  Entries
    past ``stop_n`` are still valid discoveries, only unneeded.
    """
    k: int
    num_columns: int
    stop_n: float
    rows: np.ndarray
    cols: np.ndarray
    n: np.ndarray
    remaining: np.ndarray
    complete: bool

    @property
    def trials(self) -> int:
        return self.n.shape[0]

    def lengths(self) -> np.ndarray:
        """Events up to and including the first one past ``stop_n``."""
        past = self.n > self.stop_n
        first = np.where(past.any(axis=1), past.argmax(axis=1) + 1, self.n.shape[1])
        return first

    def trace(self, b: int) -> "DiscoveryTrace":
        L = int(self.lengths()[b])
        return DiscoveryTrace(self.k, self.num_columns, self.stop_n,
                              self.rows[b, :L].copy(), self.cols[b, :L].copy(),
                              self.n[b, :L].copy(), self.remaining[b, :L].copy(),
                              complete=L == self.k * self.num_columns)


@dataclass(frozen=True)
class DiscoveryTrace:
    k: int
    num_columns: int
    stop_n: float
    rows: np.ndarray
    cols: np.ndarray
    n: np.ndarray
    remaining: np.ndarray
    complete: bool

    def __len__(self) -> int:
        return self.n.size

    @property
    def events(self) -> list[tuple[CouponId, int]]:
        return [(CouponId(int(r), int(c)), int(n))
                for r, c, n in zip(self.rows, self.cols, self.n)]

    def as_batch(self) -> TraceBatch:
        return TraceBatch(self.k, self.num_columns, self.stop_n, self.rows[None], self.cols[None],
                          self.n[None], self.remaining[None], self.complete)

    def dump(self) -> str:
        return "".join(f"{c},{r},{int(n)}\n" for r, c, n in zip(self.rows, self.cols, self.n))


def simulate_batch(config: SimulatorConfig, trials: int,
                   rng: np.random.Generator | None = None) -> TraceBatch:
    """Simulate ``trials`` independent traces in one vectorised pass.

    When the stop point needs fewer discoveries than the whole universe, only
    the earliest ``stop_n + 1`` clocks are sorted: no trace can hold more
    distinct coupons than draws.
    """
    rng = config.rng() if rng is None else rng
    k, M = config.k, config.num_columns
    U = k * M
    rows, cols, p = _coupon_tables(k, M)
    inv_p = 1.0 / p
    full = config.stop_n + 1 >= U
    L = U if full else int(config.stop_n) + 1

    clocks = rng.standard_exponential((trials, U))
    clocks *= inv_p
    if full:
        order = np.argsort(clocks, axis=1)
    else:
        part = np.argpartition(clocks, L - 1, axis=1)[:, :L]
        sub = np.take_along_axis(clocks, part, axis=1)
        order = np.take_along_axis(part, np.argsort(sub, axis=1), axis=1)
    del clocks

    ps = p[order]
    if full:
        remaining = np.cumsum(ps[:, ::-1], axis=1)[:, ::-1]
    else:
        total = 1.0 - 2.0 ** -M
        remaining = total - (np.cumsum(ps, axis=1) - ps)
    u = 1.0 - rng.random((trials, L))
    with np.errstate(divide="ignore"):
        waits = 1.0 + np.floor(np.log(u) / np.log1p(-remaining))
    n = np.cumsum(waits, axis=1)
    return TraceBatch(k, M, config.stop_n, rows[order].astype(np.int32), cols[order].astype(np.int16),
                      n, remaining, full)


def simulate_trace(config: SimulatorConfig, rng: np.random.Generator | None = None) -> DiscoveryTrace:
    return simulate_batch(config, 1, rng).trace(0)


def iter_batches(config: SimulatorConfig, trials: int, rng: np.random.Generator | None = None):
    """Yield :class:`TraceBatch` chunks totalling ``trials`` traces."""
    rng = config.rng() if rng is None else rng
    per = max(1, _BATCH_CELLS // config.universe)
    done = 0
    while done < trials:
        b = min(per, trials - done)
        yield simulate_batch(config, b, rng)
        done += b


def naive_simulate(n: int, config: SketchConfig, rng: np.random.Generator | None = None,
                   chunk: int = 1 << 20) -> Fm85Sketch:
    """Feed ``n`` uniformly random hash pairs through the sketch update."""
    if n > 10 ** 8:
        raise ValueError("naive simulation is capped at 1e8 draws")
    rng = np.random.default_rng() if rng is None else rng
    sketch = Fm85Sketch(config)
    top = np.iinfo(np.uint64).max
    left = int(n)
    while left > 0:
        m = min(chunk, left)
        h = rng.integers(0, top, size=(2, m), dtype=np.uint64, endpoint=True)
        rows, cols = hash_to_coupons(h[0], h[1], config)
        sketch.apply_batch(rows, cols)
        left -= m
    return sketch


def _check_checkpoints(checkpoints) -> np.ndarray:
    cps = np.asarray(checkpoints, dtype=np.float64)
    if cps.ndim != 1:
        raise ValueError("checkpoints must be one-dimensional")
    if np.any(np.diff(cps) < 0):
        raise ValueError("checkpoints must be ascending")
    return cps


def _check_range(trace_like, cps: np.ndarray) -> None:
    if cps.size and not trace_like.complete and np.any(trace_like.n[..., -1] <= cps[-1]):
        raise ValueError("checkpoint beyond trace range")


def replay_estimators(trace: DiscoveryTrace, checkpoints: Sequence[float]) -> np.ndarray:
    """Evaluate all six estimators at each checkpoint by replaying the trace.

    Uses the library sketch objects event by event; HLL HIP is accumulated
    along the way rather than derived from the projection.  Returns a
    ``(len(checkpoints), 6)`` array ordered as :data:`ESTIMATORS`.
    """
    cps = _check_checkpoints(checkpoints)
    _check_range(trace, cps)
    if trace.num_columns > 64:
        raise ValueError("library replay supports at most 64 columns")
    cfg = SketchConfig(trace.k, 64)
    fm = Fm85Sketch(cfg)
    hll = HllSketch(cfg)
    out = np.zeros((cps.size, len(ESTIMATORS)))
    t = 0
    for i, cp in enumerate(cps):
        while t < len(trace) and trace.n[t] <= cp:
            r, c = int(trace.rows[t]), int(trace.cols[t])
            fm.update(r, c)
            hll.update(r, c)
            t += 1
        if fm.collected_count == 0:
            continue
        out[i] = (icon_estimate(fm.collected_count, cfg.k, cfg.max_col), mdl_estimate(fm),
                  hip_estimate(fm), hll_estimate(hll), hll_mdl_estimate(hll), hll_hip_estimate(hll))
    return out


def _hll_events(batch: TraceBatch):
    """Per-event HLL register transitions: (increased, old register, first touch of row)."""
    B, L = batch.n.shape
    k, M = batch.k, batch.num_columns
    key = (np.arange(B, dtype=np.int64)[:, None] * k + batch.rows).ravel()
    order = np.argsort(key, kind="stable")
    seg = key[order]
    cs = batch.cols.ravel()[order].astype(np.int64)
    base = seg * (M + 1)
    run = np.maximum.accumulate(cs + base)
    prev = np.empty_like(run)
    prev[0] = base[0]
    prev[1:] = run[:-1]
    start = np.ones(seg.size, dtype=bool)
    start[1:] = seg[1:] != seg[:-1]
    prev[start] = base[start]
    old_s = prev - base
    old = np.empty(seg.size, dtype=np.int64)
    old[order] = old_s
    first = np.empty(seg.size, dtype=bool)
    first[order] = start
    old = old.reshape(B, L)
    inc = batch.cols > old
    return inc, old, first.reshape(B, L)


def _at(values: np.ndarray, counts: np.ndarray, empty=0.0) -> np.ndarray:
    """``values[b, counts[b, p] - 1]``, or ``empty`` where the count is zero."""
    idx = np.maximum(counts - 1, 0)
    got = np.take_along_axis(values, idx, axis=1)
    return np.where(counts > 0, got, empty)


def _segment_counts(labels: np.ndarray, weights: np.ndarray | None, counts: np.ndarray,
                    nbins: int) -> np.ndarray:
    """Histogram of ``labels[b, :counts[b, p]]`` for every (b, p): shape (B, P, nbins)."""
    B, L = labels.shape
    P = counts.shape[1]
    # checkpoint slot of each event: number of checkpoints whose prefix excludes it
    t = np.arange(L)
    slot = np.empty((B, L), dtype=np.int64)
    for b in range(B):
        slot[b] = np.searchsorted(counts[b], t, side="right")
    flat = (np.arange(B)[:, None] * (P + 1) + slot) * nbins + labels
    w = None if weights is None else weights.ravel()
    h = np.bincount(flat.ravel(), weights=w, minlength=B * (P + 1) * nbins)
    h = h.reshape(B, P + 1, nbins)
    return np.cumsum(h, axis=1)[:, :P]


def replay_batch(batch: TraceBatch, checkpoints, estimators: Sequence[str] = ESTIMATORS,
                 mdl_trials: int | None = None) -> dict[str, np.ndarray]:
    """Vectorised replay of :class:`TraceBatch`; returns ``name -> (B, P)`` estimates.

    MDL estimators are solved only for the first ``mdl_trials`` trials (all
    by default); other entries are NaN.  ICON and MDL use
    ``max(num_columns, 64)`` columns, which matches the library sketches
    whenever the simulated universe fits in 64 columns.
    """
    cps = _check_checkpoints(checkpoints)
    _check_range(batch, cps)
    unknown = set(estimators) - set(ESTIMATORS) - set(STATISTICS)
    if unknown:
        raise ValueError(f"unknown estimators {sorted(unknown)}")
    B, L = batch.n.shape
    k, M = batch.k, batch.num_columns
    mc = max(M, 64)
    P = cps.size
    counts = np.stack([np.searchsorted(batch.n[b], cps, side="right") for b in range(B)])
    out: dict[str, np.ndarray] = {}
    mdl_b = B if mdl_trials is None else min(B, mdl_trials)

    if "fm85_coupons" in estimators:
        out["fm85_coupons"] = counts.astype(np.float64)
    if "fm85_icon" in estimators or "fm85_mdl" in estimators:
        icon = icon_table(k, mc).lookup(counts)
        if "fm85_icon" in estimators:
            out["fm85_icon"] = icon
    if "fm85_hip" in estimators:
        out["fm85_hip"] = _at(np.cumsum(1.0 / batch.remaining, axis=1), counts)
    if "fm85_mdl" in estimators:
        est = np.full((B, P), np.nan)
        if mdl_b:
            sub = counts[:mdl_b]
            c = _segment_counts(batch.cols[:mdl_b].astype(np.int64) - 1, None, sub, mc)
            a = column_rates(k, mc)
            lin = ((k - c) * a).sum(axis=-1)
            m = solve_convex_mdl(lin.ravel(), c.reshape(-1, mc), a,
                                 np.maximum(icon[:mdl_b].ravel(), 1.0)).reshape(mdl_b, P)
            est[:mdl_b] = np.where(sub > 0, m, 0.0)
        out["fm85_mdl"] = est

    hll_names = {"hll", "hll_mdl", "hll_hip", "hll_zsum"} & set(estimators)
    if not hll_names:
        return out
    inc, old, first = _hll_events(batch)
    delta = np.where(inc, (np.exp2(-old.astype(np.float64)) - np.exp2(-batch.cols.astype(np.float64))) / k, 0.0)
    total = 1.0 - 2.0 ** -M
    if batch.complete:
        after = np.concatenate([np.cumsum(delta[:, :0:-1], axis=1)[:, ::-1], np.zeros((B, 1))], axis=1)
    else:
        after = total - np.cumsum(delta, axis=1)
    if "hll_hip" in estimators:
        before = after + delta
        gain = np.where(inc, 1.0 / np.where(inc, before, 1.0), 0.0)
        out["hll_hip"] = _at(np.cumsum(gain, axis=1), counts)
    raw = None
    if hll_names - {"hll_hip"}:
        zsum = k * _at(after, counts, empty=total) + k * 2.0 ** -M
        if "hll_zsum" in estimators:
            out["hll_zsum"] = zsum
        zeros = k - _at(np.cumsum(first, axis=1), counts, empty=0).astype(np.int64)
        raw = hll_raw_estimate(zsum, zeros, k)
        if "hll" in estimators:
            out["hll"] = np.where(counts > 0, raw, 0.0)
    if "hll_mdl" in estimators:
        est = np.full((B, P), np.nan)
        if mdl_b:
            sub = counts[:mdl_b]
            cols = batch.cols[:mdl_b].astype(np.int64)
            o = old[:mdl_b]
            w = inc[:mdl_b].astype(np.float64)
            # register histogram = k at zero, plus +1 at new value, -1 at old value per increase
            h = (_segment_counts(cols, w, sub, mc + 1)
                 - _segment_counts(o, w, sub, mc + 1))
            h[..., 0] += k
            lin, wts, rates = hll_mdl_batch_terms(h.reshape(-1, mc + 1), k, mc)
            start = np.maximum(np.asarray(raw)[:mdl_b].ravel(), 1.0)
            m = solve_convex_mdl(lin, wts, rates, start).reshape(mdl_b, P)
            est[:mdl_b] = np.where(sub > 0, m, 0.0)
        out["hll_mdl"] = est
    return out


def trial_matrix(results: dict[str, np.ndarray]) -> np.ndarray:
    return np.stack([results[e] for e in ESTIMATORS], axis=-1)


__all__ = [
    "ESTIMATORS", "SimulatorConfig", "DiscoveryTrace", "TraceBatch", "discovery_order",
    "simulate_trace", "simulate_batch", "iter_batches", "naive_simulate", "replay_estimators",
    "replay_batch", "trial_matrix",
]
