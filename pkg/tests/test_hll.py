import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fm85.coupons import ConfigMismatchError, Fm85Sketch, HipUnavailableError, SketchConfig
from fm85.estimators import bitmap_estimate
from fm85.hll import (
    HllSketch, expected_register_sum, from_fm85, hll_alpha, hll_estimate, hll_hip_estimate,
    hll_mdl_estimate, hll_mdl_from_histogram, hll_raw_estimate, merge_hll, register_cdf,
    register_description_length,
)


def draws(rng, k, n, max_col=64):
    return rng.integers(0, k, n), np.minimum(rng.geometric(0.5, n), max_col)


def hll_from(cfg, rows, cols):
    h = HllSketch(cfg)
    for r, c in zip(rows.tolist(), cols.tolist()):
        h.update(r, c)
    return h


def test_alpha():
    assert hll_alpha(16) == pytest.approx(0.7213 / (1 + 1.079 / 16))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32), st.integers(0, 5000))
def test_projection_matches_direct_registers(seed, n):
    rng = np.random.default_rng(seed)
    cfg = SketchConfig(16)
    rows, cols = draws(rng, 16, n)
    direct = hll_from(cfg, rows, cols)
    proj = from_fm85(Fm85Sketch.from_coupons(cfg, rows, cols))
    assert np.array_equal(direct.registers, proj.registers)
    assert not proj.hip_valid
    with pytest.raises(HipUnavailableError):
        hll_hip_estimate(proj)


def test_hip_reference():
    from fractions import Fraction
    rng = np.random.default_rng(3)
    k = 16
    rows, cols = draws(rng, k, 400)
    h = hll_from(SketchConfig(k), rows, cols)
    reg, A, R = [0] * k, Fraction(0), Fraction(1)
    for r, c in zip(rows.tolist(), cols.tolist()):
        if c > reg[r]:
            A += 1 / R
            R -= (Fraction(1, 2 ** reg[r]) - Fraction(1, 2 ** c)) / k
            reg[r] = c
    assert hll_hip_estimate(h) == pytest.approx(float(A), rel=1e-12)
    assert h.hip_remaining == pytest.approx(float(R), rel=1e-12)


def test_merge():
    rng = np.random.default_rng(4)
    cfg = SketchConfig(32)
    ra, ca = draws(rng, 32, 300)
    rb, cb = draws(rng, 32, 500)
    m = merge_hll(hll_from(cfg, ra, ca), hll_from(cfg, rb, cb))
    assert np.array_equal(m.registers, hll_from(cfg, np.r_[ra, rb], np.r_[ca, cb]).registers)
    assert not m.hip_valid
    with pytest.raises(ConfigMismatchError):
        merge_hll(HllSketch(cfg), HllSketch(SketchConfig(16)))


def test_raw_estimate_splice():
    k = 64
    # all registers empty but a few: linear counting regime
    assert hll_raw_estimate(k - 3 + 3 * 0.5, 61, k) == pytest.approx(bitmap_estimate(3, k))
    # no empty registers: harmonic mean
    assert hll_raw_estimate(k * 2.0 ** -10, 0, k) == pytest.approx(hll_alpha(k) * k * 2 ** 10)
    arr = hll_raw_estimate(np.array([k * 2.0 ** -10, k - 1.5]), np.array([0, 61]), k)
    assert arr.shape == (2,)


def test_hll_estimate_empty():
    assert hll_estimate(HllSketch(SketchConfig(16))) == 0.0
    assert hll_mdl_estimate(HllSketch(SketchConfig(16))) == 0.0


def test_register_cdf_against_monte_carlo():
    rng = np.random.default_rng(8)
    k, n, T, M = 16, 100, 4000, 20
    F = register_cdf(n, k, M)
    assert F[-1] == pytest.approx(1.0)
    assert np.all(np.diff(F) >= 0)
    regs = np.zeros((T, k), dtype=np.int64)
    for t in range(T):
        rows, cols = draws(rng, k, n, M)
        np.maximum.at(regs[t], rows, cols)
    emp = np.array([(regs <= v).mean() for v in range(M + 1)])
    assert np.allclose(emp, F, atol=0.01)
    zs = np.exp2(-regs.astype(float)).sum(axis=1)
    assert zs.mean() == pytest.approx(expected_register_sum(n, k, M), rel=5 * zs.std() / zs.mean() / math.sqrt(T))


def test_mdl_brute_force():
    rng = np.random.default_rng(9)
    k, M = 4, 10
    for n in (1, 3, 10, 40, 200):
        regs = np.zeros(k, dtype=np.int64)
        rows, cols = draws(rng, k, n, M)
        np.maximum.at(regs, rows, cols)
        hist = np.bincount(regs, minlength=M + 1)
        got = hll_mdl_from_histogram(hist, k, M)
        costs = [register_description_length(hist, k, m, M) for m in range(1, 20000)]
        best = 1 + int(np.argmin(costs))
        assert register_description_length(hist, k, got, M) == pytest.approx(costs[best - 1], rel=1e-12)


def test_hll_update_monotone():
    h = HllSketch(SketchConfig(16))
    assert h.update(0, 3)
    assert not h.update(0, 2)
    assert h.registers[0] == 3
    assert h.hll_update(1 << 60, 1)
    assert h.registers[1] == 4
