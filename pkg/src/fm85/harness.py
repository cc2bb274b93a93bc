"""Error and bias constants by flat-region averaging and 1/k extrapolation.

For each ``k`` a batch of simulated streams is evaluated at checkpoints
``n = k * 2**e`` spread along the flat part of the error curve.  The
per-checkpoint ``sqrt(k) * RMSE / n`` (or ``k * bias / n``) values are
averaged, and a quadratic in ``1/k`` fitted through the per-``k`` averages
gives the ``k -> infinity`` constant as its intercept.

Checkpoints within one trace are strongly correlated, so uncertainties come
from a bootstrap over whole trials.  Trials are dealt round-robin into
groups whose moment sums are accumulated while streaming; the bootstrap
resamples groups.

Bias measurements can optionally use control variates: the coupon count
``C`` and the HLL sum ``sum 2**-register`` have exactly computable means,
and subtracting their fitted linear contribution removes most of the noise
from estimators that are smooth functions of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .estimators import expected_coupons
from .hll import expected_register_sum
from .simulator import ESTIMATORS, STATISTICS, SimulatorConfig, TraceBatch, iter_batches, replay_batch

Oracle = Callable[[TraceBatch, np.ndarray], np.ndarray]
Estimator = Union[str, Oracle]
BOOTSTRAP_ROUNDS = 200
GROUPS = 200


@dataclass(frozen=True)
class FlatRegionSpec:
    lo_exponent: int = 20
    hi_exponent: int = 40
    per_octave: int = 4

    def __post_init__(self):
        if self.lo_exponent < 10:
            raise ValueError("flat region must start at e >= 10")
        if self.hi_exponent < self.lo_exponent or self.per_octave < 1:
            raise ValueError("empty flat region")

    def exponents(self) -> np.ndarray:
        steps = (self.hi_exponent - self.lo_exponent) * self.per_octave
        return self.lo_exponent + np.arange(steps + 1) / self.per_octave

    def checkpoints(self, k: int) -> np.ndarray:
        return k * np.exp2(self.exponents())

    def simulator(self, k: int, seed: int = 0) -> SimulatorConfig:
        stop = self.hi_exponent + 5
        return SimulatorConfig(k=k, num_columns=stop + 11, stop_exponent=stop, seed=seed)


@dataclass(frozen=True)
class CheckpointSpec:
    """Explicit checkpoints ``n = k * ratio`` instead of a flat region."""
    ratios: tuple[float, ...]
    stop_exponent: int
    num_columns: int | None = None

    def __post_init__(self):
        r = np.asarray(self.ratios, dtype=np.float64)
        if r.size == 0 or np.any(np.diff(r) < 0) or r[0] <= 0:
            raise ValueError("ratios must be positive and ascending")
        if r[-1] > 2.0 ** self.stop_exponent:
            raise ValueError("checkpoint beyond the stop exponent")

    def checkpoints(self, k: int) -> np.ndarray:
        return k * np.asarray(self.ratios, dtype=np.float64)

    def simulator(self, k: int, seed: int = 0) -> SimulatorConfig:
        cols = self.stop_exponent + 11 if self.num_columns is None else self.num_columns
        return SimulatorConfig(k=k, num_columns=cols, stop_exponent=self.stop_exponent, seed=seed)


@dataclass
class FitResult:
    c0: float
    c1: float
    c2: float
    residual_rms: float
    points: list[tuple[float, float]]
    c0_uncertainty: float = float("nan")
    c1_uncertainty: float = float("nan")

    def to_dict(self) -> dict:
        return {"c0": self.c0, "c1": self.c1, "c2": self.c2, "residual_rms": self.residual_rms,
                "c0_uncertainty": self.c0_uncertainty, "c1_uncertainty": self.c1_uncertainty,
                "points": [list(p) for p in self.points]}


@dataclass
class FlatMeasurement:
    value: float
    uncertainty: float
    per_checkpoint: np.ndarray = field(repr=False)


def fit_quadratic(points: Sequence[tuple[float, float]], sigmas: Sequence[float] | None = None) -> FitResult:
    """Least-squares ``y = c0 + c1 x + c2 x^2``.

    Solved with an orthogonal factorisation rather than the normal equations.
    If per-point ``sigmas`` are given they are propagated (unweighted fit) to
    uncertainties on ``c0`` and ``c1``.
    """
    pts = [(float(x), float(y)) for x, y in points]
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    if len(pts) < 4 or np.unique(x).size < 4:
        raise ValueError("need at least 4 distinct x values")
    V = np.vander(x, 3, increasing=True)
    coef, _, rank, _ = np.linalg.lstsq(V, y, rcond=None)
    if rank < 3:
        raise np.linalg.LinAlgError("rank-deficient quadratic fit")
    resid = y - V @ coef
    unc = [float("nan")] * 2
    if sigmas is not None:
        w = np.linalg.pinv(V)[:2]
        unc = np.sqrt(((w * np.asarray(sigmas, dtype=np.float64)) ** 2).sum(axis=1)).tolist()
    return FitResult(float(coef[0]), float(coef[1]), float(coef[2]),
                     float(np.sqrt(np.mean(resid ** 2))), pts, unc[0], unc[1])


class MomentAccumulator:
    """Per-group sums for error and (optionally controlled) bias statistics.

    ``x`` is the relative error ``n_hat / n - 1`` and ``y`` the control
    deviations, all shaped ``(trials, checkpoints)``.
    """

    def __init__(self, checkpoints: int, controls: int = 0, groups: int = GROUPS):
        G, P, q = groups, checkpoints, controls
        self.groups = G
        self.count = np.zeros(G)
        self.sx = np.zeros((G, P))
        self.sxx = np.zeros((G, P))
        self.sy = np.zeros((q, G, P))
        self.sxy = np.zeros((q, G, P))
        self.syy = np.zeros((q, q, G, P))

    def add(self, x: np.ndarray, ys: Sequence[np.ndarray] = (), first_trial: int = 0) -> None:
        g = (first_trial + np.arange(x.shape[0])) % self.groups
        np.add.at(self.count, g, 1.0)
        np.add.at(self.sx, g, x)
        np.add.at(self.sxx, g, x * x)
        for i, y in enumerate(ys):
            np.add.at(self.sy[i], g, y)
            np.add.at(self.sxy[i], g, x * y)
            for j in range(i, len(ys)):
                np.add.at(self.syy[i, j], g, y * ys[j])
                if j != i:
                    self.syy[j, i] = self.syy[i, j]

    @property
    def trials(self) -> int:
        return int(self.count.sum())

    def _weights(self, rng: np.random.Generator | None) -> np.ndarray:
        live = self.count > 0
        if rng is None:
            return live[None, :].astype(np.float64)
        G = int(live.sum())
        W = np.zeros((BOOTSTRAP_ROUNDS, self.groups))
        W[:, live] = rng.multinomial(G, np.full(G, 1.0 / G), size=BOOTSTRAP_ROUNDS)
        return W

    def rmse_values(self, W: np.ndarray, k: int) -> np.ndarray:
        """``mean_p sqrt(k * MSE_p)`` for each row of group weights."""
        msq = (W @ self.sxx) / (W @ self.count)[:, None]
        return np.sqrt(k * msq).mean(axis=1)

    def bias_values(self, W: np.ndarray, k: int, controlled: bool) -> np.ndarray:
        N = (W @ self.count)[:, None]
        mx = (W @ self.sx) / N
        q = self.sy.shape[0]
        if not controlled or q == 0:
            return (k * mx).mean(axis=1)
        my = np.stack([W @ self.sy[i] for i in range(q)], axis=-1) / N[..., None]
        cxy = np.stack([W @ self.sxy[i] for i in range(q)], axis=-1) / N[..., None] - mx[..., None] * my
        cyy = np.empty(mx.shape + (q, q))
        for i in range(q):
            for j in range(q):
                cyy[..., i, j] = (W @ self.syy[i, j]) / N - my[..., i] * my[..., j]
        # tiny ridge keeps degenerate (constant) controls solvable
        ridge = 1e-12 * np.trace(cyy, axis1=-2, axis2=-1)[..., None, None] + 1e-300
        beta = np.linalg.solve(cyy + ridge * np.eye(q), cxy[..., None])[..., 0]
        return (k * (mx - (beta * my).sum(axis=-1))).mean(axis=1)

    def error(self, k: int, rng: np.random.Generator) -> FlatMeasurement:
        W1 = self._weights(None)
        per = np.sqrt(k * self.sxx.sum(axis=0) / self.count.sum())
        boot = self.rmse_values(self._weights(rng), k)
        return FlatMeasurement(float(self.rmse_values(W1, k)[0]), float(boot.std(ddof=1)), per)

    def bias(self, k: int, rng: np.random.Generator, controlled: bool = False) -> FlatMeasurement:
        W1 = self._weights(None)
        per = k * self.sx.sum(axis=0) / self.count.sum()
        boot = self.bias_values(self._weights(rng), k, controlled)
        return FlatMeasurement(float(self.bias_values(W1, k, controlled)[0]), float(boot.std(ddof=1)), per)


def control_deviations(stats: dict, k: int, region: FlatRegionSpec) -> list[np.ndarray]:
    """Relative deviations of the control statistics from their exact means."""
    n = np.floor(region.checkpoints(k))
    M = region.simulator(k).num_columns
    return [stats["fm85_coupons"] / expected_coupons(n, k, M) - 1.0,
            stats["hll_zsum"] / expected_register_sum(n, k, M) - 1.0]


def _stream(k: int, trials: int, region: FlatRegionSpec, rng: np.random.Generator,
            estimators: Sequence[Estimator], mdl_trials: int | None, with_controls: bool):
    """Yield ``(first_trial, {name: estimates}, controls)`` per simulated batch."""
    cps = region.checkpoints(k)
    cfg = region.simulator(k)
    names = [e for e in estimators if isinstance(e, str)]
    calls = [e for e in estimators if not isinstance(e, str)]
    wanted = names + (list(STATISTICS) if with_controls else [])
    done = 0
    for batch in iter_batches(cfg, trials, rng):
        left = None if mdl_trials is None else max(mdl_trials - done, 0)
        res = replay_batch(batch, cps, wanted, mdl_trials=left) if wanted else {}
        for f in calls:
            res[f] = np.asarray(f(batch, cps), dtype=np.float64)
        controls = control_deviations(res, k, region) if with_controls else []
        yield done, res, controls
        done += batch.trials


def simulate_estimates(k: int, trials: int, region: FlatRegionSpec, rng: np.random.Generator,
                       estimators: Sequence[Estimator] = ESTIMATORS,
                       mdl_trials: int | None = None) -> dict:
    """Estimates ``(trials, checkpoints)`` for each estimator, all from the same traces.

    String estimators name the built-in replay (including the control
    statistics); callables receive each :class:`TraceBatch` and the
    checkpoint array.  MDL rows are limited to the first ``mdl_trials``.
    """
    parts: dict = {e: [] for e in estimators}
    for _, res, _ in _stream(k, trials, region, rng, estimators, mdl_trials, False):
        for e in estimators:
            parts[e].append(res[e])
    out = {}
    for e, chunks in parts.items():
        a = np.concatenate(chunks, axis=0)
        if isinstance(e, str) and "mdl" in e and mdl_trials is not None:
            a = a[:mdl_trials]
        out[e] = a
    return out


def accumulate(k: int, trials: int, region: FlatRegionSpec, rng: np.random.Generator,
               estimators: Sequence[Estimator] = ESTIMATORS, mdl_trials: int | None = None,
               control_variates: bool = False) -> dict:
    """Stream simulations into one :class:`MomentAccumulator` per estimator."""
    cps = region.checkpoints(k)
    q = len(STATISTICS) if control_variates else 0
    acc = {e: MomentAccumulator(cps.size, q) for e in estimators}
    for first, res, controls in _stream(k, trials, region, rng, estimators, mdl_trials, control_variates):
        for e in estimators:
            est = res[e]
            keep = ~np.isnan(est).any(axis=1)
            if not keep.any():
                continue
            ys = [c[keep] for c in controls]
            acc[e].add(est[keep] / cps - 1.0, ys, first)
    return acc


def summarize_error(est: np.ndarray, cps: np.ndarray, k: int, rng: np.random.Generator) -> FlatMeasurement:
    acc = MomentAccumulator(cps.size, 0, min(GROUPS, est.shape[0]))
    acc.add(est / cps - 1.0)
    return acc.error(k, rng)


def summarize_bias(est: np.ndarray, cps: np.ndarray, k: int, rng: np.random.Generator,
                   controls: Sequence[np.ndarray] | None = None) -> FlatMeasurement:
    controls = list(controls or [])
    acc = MomentAccumulator(cps.size, len(controls), min(GROUPS, est.shape[0]))
    acc.add(est / cps - 1.0, controls)
    return acc.bias(k, rng, controlled=bool(controls))


def _check_trials(trials: int) -> None:
    if trials < 100:
        raise ValueError("need at least 100 trials")


def flat_region_error(estimator: Estimator, k: int, trials: int, region: FlatRegionSpec,
                      rng: np.random.Generator) -> FlatMeasurement:
    """Mean over the flat region of ``sqrt(k) * RMSE / n``, with bootstrap uncertainty."""
    _check_trials(trials)
    return accumulate(k, trials, region, rng, [estimator])[estimator].error(k, rng)


def flat_region_bias(estimator: Estimator, k: int, trials: int, region: FlatRegionSpec,
                     rng: np.random.Generator, control_variates: bool = False) -> FlatMeasurement:
    """Mean over the flat region of ``k * bias / n``, with bootstrap uncertainty."""
    _check_trials(trials)
    acc = accumulate(k, trials, region, rng, [estimator], control_variates=control_variates)
    return acc[estimator].bias(k, rng, control_variates)


def _check_k_list(k_list: Sequence[int]) -> None:
    if max(k_list) < 4 * min(k_list):
        raise ValueError("k_list must span at least two octaves")


def _fit(k_list, ms: Sequence[FlatMeasurement]) -> FitResult:
    return fit_quadratic([(1.0 / k, m.value) for k, m in zip(k_list, ms)], [m.uncertainty for m in ms])


def error_constant(estimator: Estimator, k_list: Sequence[int], trials: int, region: FlatRegionSpec,
                   rng: np.random.Generator) -> FitResult:
    _check_k_list(k_list)
    return _fit(k_list, [flat_region_error(estimator, k, trials, region, rng) for k in k_list])


def bias_constant(estimator: Estimator, k_list: Sequence[int], trials: int, region: FlatRegionSpec,
                  rng: np.random.Generator, control_variates: bool = False) -> FitResult:
    _check_k_list(k_list)
    return _fit(k_list, [flat_region_bias(estimator, k, trials, region, rng, control_variates)
                         for k in k_list])


@dataclass
class ConstantsReport:
    k_list: list[int]
    error: dict[str, list[FlatMeasurement]]
    bias: dict[str, list[FlatMeasurement]]

    def error_fit(self, name: str) -> FitResult:
        return _fit(self.k_list, self.error[name])

    def bias_fit(self, name: str) -> FitResult:
        return _fit(self.k_list, self.bias[name])


def measure_constants(k_list: Sequence[int], trials: int | Mapping[int, int], region: FlatRegionSpec,
                      rng: np.random.Generator, estimators: Sequence[str] = ESTIMATORS,
                      mdl_trials: int | None = None, control_variates: bool = False) -> ConstantsReport:
    """Error and bias measurements for several estimators sharing each k's traces.

    ``trials`` may map each ``k`` to its own trial count.
    """
    _check_k_list(k_list)
    err: dict = {e: [] for e in estimators}
    bias: dict = {e: [] for e in estimators}
    for k in k_list:
        t = trials[k] if isinstance(trials, Mapping) else trials
        _check_trials(t)
        acc = accumulate(k, t, region, rng, estimators, mdl_trials, control_variates)
        for e in estimators:
            err[e].append(acc[e].error(k, rng))
            bias[e].append(acc[e].bias(k, rng, control_variates))
    return ConstantsReport(list(k_list), err, bias)


__all__ = [
    "FlatRegionSpec", "CheckpointSpec", "FitResult", "FlatMeasurement", "ConstantsReport", "MomentAccumulator",
    "fit_quadratic", "flat_region_error", "flat_region_bias", "error_constant", "bias_constant",
    "measure_constants", "simulate_estimates", "accumulate", "control_deviations",
    "summarize_error", "summarize_bias",
]
