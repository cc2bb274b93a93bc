import numpy as np
import pytest
from scipy import stats

from fm85.coupons import Fm85Sketch, SketchConfig
from fm85.estimators import coupon_count_variance, expected_coupons
from fm85.simulator import (
    ESTIMATORS, STATISTICS, SimulatorConfig, discovery_order, iter_batches, naive_simulate,
    replay_batch, replay_estimators, simulate_batch, simulate_trace, trial_matrix,
)


def test_config_validation():
    with pytest.raises(ValueError):
        SimulatorConfig(16, num_columns=20, stop_exponent=10)
    cfg = SimulatorConfig(16, 30, 10, seed=3)
    assert cfg.stop_n == 16 * 1024 and cfg.universe == 480
    assert cfg.rng().random() == np.random.default_rng(3).random()


def test_discovery_order_is_permutation():
    cfg = SimulatorConfig(16, 24, 8)
    rows, cols = discovery_order(cfg, np.random.default_rng(0))
    assert sorted(zip(cols.tolist(), rows.tolist())) == [(c, r) for c in range(1, 25) for r in range(16)]


def test_first_discovery_column_law():
    cfg = SimulatorConfig(16, 24, 8)
    b = simulate_batch(cfg, 20000, np.random.default_rng(1))
    first = b.cols[:, 0]
    freq = np.bincount(first, minlength=5)[1:5] / first.size
    assert np.allclose(freq, 0.5 ** np.arange(1, 5), atol=0.01)
    assert np.all(b.n[:, 0] == 1)


def test_trace_invariants():
    cfg = SimulatorConfig(32, 40, 20)
    t = simulate_trace(cfg, np.random.default_rng(2))
    assert np.all(np.diff(t.n) >= 1)
    assert len(set(zip(t.rows.tolist(), t.cols.tolist()))) == len(t)
    p = 1.0 / (32 * 2.0 ** t.cols)
    want = (1 - 2.0 ** -40) - (np.cumsum(p) - p)
    assert np.allclose(t.remaining, want, rtol=1e-9, atol=1e-15)
    assert t.n[-1] > cfg.stop_n or t.complete


def test_prefix_mode_matches_full_mode():
    # both modes consume the same clocks; with one trial the uniforms line up too
    full = simulate_trace(SimulatorConfig(16, 30, 12), np.random.default_rng(9))
    cfg = SimulatorConfig(16, 30, 3)
    pre = simulate_batch(cfg, 1, np.random.default_rng(9))
    assert not pre.complete
    L = pre.n.shape[1]
    assert np.array_equal(pre.rows[0], full.rows[:L])
    assert np.array_equal(pre.n[0], full.n[:L])


def test_dump_format():
    t = simulate_trace(SimulatorConfig(16, 20, 4), np.random.default_rng(0))
    lines = t.dump().splitlines()
    assert len(lines) == len(t)
    c, r, n = map(int, lines[0].split(","))
    assert (c, r, n) == (int(t.cols[0]), int(t.rows[0]), int(t.n[0]))
    assert t.events[0][0] == (r, c)


def test_iter_batches_totals_and_determinism():
    cfg = SimulatorConfig(64, 30, 10)
    sizes = [b.trials for b in iter_batches(cfg, 250)]
    assert sum(sizes) == 250
    a = next(iter_batches(cfg, 3, np.random.default_rng(5)))
    b = next(iter_batches(cfg, 3, np.random.default_rng(5)))
    assert np.array_equal(a.n, b.n)


@pytest.mark.parametrize("k", [16, 64])
def test_fast_replay_matches_library_replay(k):
    cfg = SimulatorConfig(k, 40, 20)
    batch = simulate_batch(cfg, 12, np.random.default_rng(k))
    cps = k * np.exp2(np.arange(-4, 20.5, 0.5))
    fast = trial_matrix(replay_batch(batch, cps))
    for b in range(batch.trials):
        slow = replay_estimators(batch.trace(b), cps)
        assert np.allclose(fast[b], slow, rtol=1e-5)


def test_replay_statistics_and_checks():
    cfg = SimulatorConfig(16, 30, 10)
    batch = simulate_batch(cfg, 4, np.random.default_rng(0))
    cps = 16 * np.exp2(np.arange(0, 10))
    out = replay_batch(batch, cps, list(ESTIMATORS) + list(STATISTICS), mdl_trials=2)
    assert np.isnan(out["fm85_mdl"][2:]).all() and not np.isnan(out["fm85_mdl"][:2]).any()
    for b in range(4):
        s = Fm85Sketch.from_coupons(SketchConfig(16), *[x[batch.n[b] <= cps[-1]] for x in (batch.rows[b], batch.cols[b])])
        assert out["fm85_coupons"][b, -1] == s.collected_count
    with pytest.raises(ValueError):
        replay_batch(batch, cps[::-1])
    short = simulate_batch(SimulatorConfig(64, 40, 3), 2, np.random.default_rng(0))
    assert not short.complete
    with pytest.raises(ValueError, match="beyond trace range"):
        replay_batch(short, [short.stop_n * 1e6])
    with pytest.raises(ValueError):
        replay_batch(batch, cps, ["nope"])


def test_empty_checkpoint_gives_zero():
    batch = simulate_batch(SimulatorConfig(16, 30, 10), 2, np.random.default_rng(0))
    out = replay_batch(batch, [0.5])
    for e in ESTIMATORS:
        assert np.all(out[e] == 0)


def test_naive_simulate_cap():
    with pytest.raises(ValueError):
        naive_simulate(10 ** 9, SketchConfig(16))


@pytest.mark.parametrize("ratio", [1, 32])
def test_accelerated_matches_naive_distribution(ratio):
    k, T = 16, 1500
    n = k * ratio
    rng = np.random.default_rng(ratio)
    naive = [naive_simulate(n, SketchConfig(k), rng).collected_count for _ in range(T)]
    cfg = SimulatorConfig(k, 30, int(np.log2(ratio)) + 2)
    fast = np.concatenate([replay_batch(b, [n], ["fm85_coupons"])["fm85_coupons"][:, 0]
                           for b in iter_batches(cfg, T, rng)])
    assert stats.ks_2samp(naive, fast).pvalue > 0.001
    for sample in (np.array(naive), fast):
        se = np.sqrt(coupon_count_variance(n, k) / T)
        assert abs(sample.mean() - expected_coupons(n, k)) < 5 * se
