"""``fm85`` command-line interface.

Exit codes: 0 success, 2 usage error, 3 corrupt data, 4 semantic refusal
(HIP requested from a merged sketch, merging incompatible sketches).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import BinaryIO, Iterator, Sequence

import numpy as np

from . import __version__
from .compression import CorruptSketchError, ZlibAdapter, compress, decompress, deserialize, serialize
from .coupons import ConfigMismatchError, Fm85Sketch, HipUnavailableError, SketchConfig, hash_to_coupon, merge
from .entropy import entropy_curve
from .estimators import hip_estimate, icon_estimate, mdl_estimate
from .harness import CheckpointSpec, FlatRegionSpec, accumulate, measure_constants
from .hashing import DEFAULT_SEED, hash_pairs
from .simulator import ESTIMATORS, SimulatorConfig, iter_batches, replay_batch, simulate_trace

EXIT_OK, EXIT_USAGE, EXIT_CORRUPT, EXIT_REFUSED = 0, 2, 3, 4
BUFFER_CAPACITY = 2000
DEFAULT_K = 4096


class UsageError(Exception):
    pass


class Refusal(Exception):
    pass


# ------------------------------------------------------------------ inputs

def parse_k(text: str) -> int:
    k = int(text)
    if k < 16 or k & (k - 1):
        raise UsageError(f"--k must be a power of two >= 16, got {text}")
    return k


def parse_k_range(text: str) -> list[int]:
    """``"16..512"`` -> every power of two in range; ``"16,64"`` -> as listed."""
    if ".." in text:
        lo, hi = (parse_k(t) for t in text.split("..", 1))
        if hi < lo:
            raise UsageError(f"empty k range {text}")
        return [1 << e for e in range(lo.bit_length() - 1, hi.bit_length())]
    return [parse_k(t) for t in text.split(",")]


def cli_estimator(name: str) -> str:
    key = name.replace("-", "_")
    if key not in ESTIMATORS:
        raise UsageError(f"unknown estimator {name!r}; choose from {', '.join(e.replace('_', '-') for e in ESTIMATORS)}")
    return key


def read_items(stream: BinaryIO, fmt: str) -> Iterator[bytes]:
    if fmt == "text":
        for line in io.TextIOWrapper(stream, encoding="utf-8", newline=None):
            token = line.rstrip("\n")
            if token:
                yield token.encode("utf-8")
    elif fmt == "u64":
        while True:
            chunk = stream.read(8 * 4096)
            if not chunk:
                return
            if len(chunk) % 8:
                raise UsageError("raw u64 input length is not a multiple of 8")
            for i in range(0, len(chunk), 8):
                yield chunk[i:i + 8]
    else:
        raise UsageError(f"unknown input format {fmt!r}")


class UpdateBuffer:
    """Holds pending coupons between decompress / apply / recompress cycles.

    Coupons left of the window are already collected and are dropped before
    they reach the buffer; the threshold follows the window as it slides.
    """

    def __init__(self, cs, capacity: int = BUFFER_CAPACITY):
        if capacity < 1:
            raise UsageError("buffer capacity must be positive")
        self.compressed = cs
        self.capacity = capacity
        self.threshold = cs.window_offset
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.discarded = 0
        self.flushes = 0

    def offer(self, row: int, col: int) -> None:
        if col < self.threshold:
            self.discarded += 1
            return
        self.rows.append(row)
        self.cols.append(col)
        if len(self.rows) >= self.capacity:
            self.flush()

    def flush(self) -> None:
        if not self.rows:
            return
        sketch = decompress(self.compressed)
        sketch.apply_batch(self.rows, self.cols)
        self.compressed = compress(sketch, self.compressed.hash_seed)
        self.threshold = sketch.window_offset
        self.rows, self.cols = [], []
        self.flushes += 1


def load_sketch_file(path: Path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    return deserialize(data)


def write_atomic(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ----------------------------------------------------------------- outputs

def emit(args, rows: Sequence[dict], meta: dict | None = None, fmt: str | None = None) -> None:
    """Write ``rows`` as CSV or JSON to ``--out`` (or stdout)."""
    fmt = fmt or args.format
    if fmt == "json":
        payload = {**(meta or {}), "rows": list(rows)} if meta is not None else list(rows)
        text = json.dumps(payload, indent=2, sort_keys=False) + "\n"
    else:
        buf = io.StringIO()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        for key, val in (meta or {}).items():
            buf.write(f"{key},{val}\n")
        text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def plot_path(args, name: str) -> Path | None:
    return Path(args.plot_dir) / name if args.plot_dir else None


# ---------------------------------------------------------------- commands

def cmd_update(args) -> int:
    path = Path(args.sketch)
    seed = DEFAULT_SEED if args.seed is None else args.seed
    if path.exists():
        cs = load_sketch_file(path)
        if args.k is not None and parse_k(args.k) != cs.k:
            raise Refusal(f"sketch file has k={cs.k}, --k asks for {args.k}")
        if args.seed is not None and args.seed != cs.hash_seed:
            raise Refusal(f"sketch file was built with hash seed {cs.hash_seed}")
        seed = cs.hash_seed
    else:
        k = parse_k(args.k) if args.k is not None else DEFAULT_K
        cs = compress(Fm85Sketch(SketchConfig(k)), seed)
    cfg = cs.config
    buf = UpdateBuffer(cs, args.buffer)
    items = 0
    source = sys.stdin.buffer if args.input in (None, "-") else open(args.input, "rb")
    try:
        for h1, h2 in hash_pairs(read_items(source, args.input_format), seed):
            row, col = hash_to_coupon(h1, h2, cfg)
            buf.offer(row, col)
            items += 1
    finally:
        if source is not sys.stdin.buffer:
            source.close()
    buf.flush()
    data = serialize(buf.compressed)
    write_atomic(path, data)
    emit(args, [{"items": items, "discarded": buf.discarded, "flushes": buf.flushes,
                 "collected": buf.compressed.collected_count,
                 "window_offset": buf.compressed.window_offset,
                 "bits_per_row": 8 * len(data) / cfg.k}])
    return EXIT_OK


def cmd_estimate(args) -> int:
    cs = load_sketch_file(args.sketch)
    sketch = decompress(cs)
    want = args.estimator
    cfg = sketch.config
    if want == "hip" and not sketch.hip_valid:
        raise Refusal("HIP estimate unavailable: the sketch was merged")
    row = {}
    if want in ("icon", "all"):
        row["icon"] = icon_estimate(sketch.collected_count, cfg.k, cfg.max_col)
    if want in ("hip", "all"):
        row["hip"] = hip_estimate(sketch) if sketch.hip_valid else "unavailable"
    if want in ("mdl", "all"):
        row["mdl"] = mdl_estimate(sketch)
    if want == "all":
        row.update({"collected": sketch.collected_count, "window_offset": sketch.window_offset,
                    "bits_per_row": 8 * len(serialize(cs)) / cfg.k})
    emit(args, [row])
    return EXIT_OK


def cmd_merge(args) -> int:
    if not args.out:
        raise UsageError("merge needs --out")
    a, b = load_sketch_file(args.a), load_sketch_file(args.b)
    if a.config != b.config:
        raise Refusal(f"cannot merge k={a.k} with k={b.k}")
    if a.hash_seed != b.hash_seed:
        raise Refusal("sketches were built with different hash seeds")
    m = merge(decompress(a), decompress(b))
    write_atomic(Path(args.out), serialize(compress(m, a.hash_seed)))
    return EXIT_OK


def cmd_info(args) -> int:
    cs = load_sketch_file(args.sketch)
    sketch = decompress(cs)
    size = len(serialize(cs))
    emit(args, [{"k": cs.k, "max_col": cs.max_col, "collected": cs.collected_count,
                 "window_offset": cs.window_offset, "rotated": cs.rotated, "hip_valid": cs.hip_valid,
                 "hash_seed": cs.hash_seed, "surprising": len(sketch.surprising),
                 "window_payload_bytes": len(cs.window_payload),
                 "surprising_payload_bytes": len(cs.surprising_payload),
                 "file_bytes": size, "bits_per_row": 8 * size / cs.k}])
    return EXIT_OK


def cmd_entropy(args) -> int:
    kinds = ["fm85", "hll"] if args.kind == "both" else [args.kind]
    curves = {kind: entropy_curve(kind, args.samples) for kind in kinds}
    rows = [{"kind": kind, "log2_c": x, "entropy_bits": y}
            for kind, c in curves.items() for x, y in c.samples]
    meta = {f"mean_{kind}": c.mean_constant for kind, c in curves.items()}
    if args.format == "json":
        emit(args, rows, meta)
    else:
        emit(args, rows, {f"mean_{kind}": f"{c.mean_constant:.12f}" for kind, c in curves.items()})
    p = plot_path(args, "entropy.png")
    if p:
        from .plotting import plot_entropy_curves
        plot_entropy_curves(curves, p)
    return EXIT_OK


def _exponents(args) -> np.ndarray:
    if args.checkpoints:
        return np.array([float(t) for t in args.checkpoints.split(",")])
    steps = int(round((args.hi - args.lo) * args.per_octave))
    return args.lo + np.arange(steps + 1) / args.per_octave


def cmd_simulate(args) -> int:
    k = parse_k(args.k) if args.k is not None else 256
    names = [cli_estimator(e) for e in args.estimators.split(",")] if args.estimators else list(ESTIMATORS)
    exps = _exponents(args)
    if np.any(np.diff(exps) < 0):
        raise UsageError("checkpoints must be ascending")
    stop = args.stop_exponent if args.stop_exponent is not None else int(np.ceil(exps.max())) + 5
    cols = args.num_columns if args.num_columns is not None else min(stop + 11, 64)
    try:
        cfg = SimulatorConfig(k, cols, stop, seed=0 if args.seed is None else args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    cps = k * np.exp2(exps)
    rows, sq = [], {e: np.zeros(cps.size) for e in names}
    trial = 0
    for batch in iter_batches(cfg, args.trials, cfg.rng()):
        if args.dump_trace and trial == 0:
            Path(args.dump_trace).write_text(batch.trace(0).dump())
        res = replay_batch(batch, cps, names)
        for b in range(batch.trials):
            for p, n in enumerate(cps):
                rows.append({"trial": trial + b, "n": n, **{e: float(res[e][b, p]) for e in names}})
        for e in names:
            sq[e] += ((res[e] / cps - 1.0) ** 2).sum(axis=0)
        trial += batch.trials
    if args.summary:
        rows = [{"n": n, **{f"{e}_se": float(np.sqrt(sq[e][p] / trial)) for e in names}}
                for p, n in enumerate(cps)]
    emit(args, rows)
    p = plot_path(args, "simulate.png")
    if p:
        from .plotting import plot_error_curves
        plot_error_curves(cps, k, {e: np.sqrt(k * sq[e] / trial) for e in names}, p)
    return EXIT_OK


def cmd_fit(args) -> int:
    ks = parse_k_range(args.k) if args.k is not None else [1 << e for e in range(4, 10)]
    est = cli_estimator(args.estimator)
    region = FlatRegionSpec(args.lo, args.hi, args.per_octave)
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    try:
        report = measure_constants(ks, args.trials, region, rng, [est],
                                   control_variates=args.kind == "bias")
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    fit = report.error_fit(est) if args.kind == "error" else report.bias_fit(est)
    result = {"estimator": args.estimator, "kind": args.kind, "k": ks, "trials": args.trials,
              "region": [args.lo, args.hi, args.per_octave], **fit.to_dict()}
    text = json.dumps(result, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    points = args.points or (str(Path(args.out).with_suffix(".points.csv")) if args.out else None)
    if points:
        ms = report.error[est] if args.kind == "error" else report.bias[est]
        with open(points, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["inv_k", "value", "uncertainty"])
            for k, m in zip(ks, ms):
                w.writerow([1.0 / k, m.value, m.uncertainty])
    p = plot_path(args, f"fit_{est}_{args.kind}.png")
    if p:
        from .plotting import plot_fit
        plot_fit(fit, p, f"{args.estimator} {args.kind}")
    return EXIT_OK


def compare_sizes(scale: float) -> tuple[int, int]:
    k_fm85 = 16
    while 2 * k_fm85 <= (1 << 15) * scale:
        k_fm85 *= 2
    return k_fm85, 2 * k_fm85


def cmd_compare_hll(args) -> int:
    """FM85 at k against HLL at 2k on independent streams of the same lengths."""
    k1, k2 = compare_sizes(args.scale)
    design = 1e4 * k1
    ns = np.unique(np.concatenate([k1 * np.exp2(np.arange(-5, 14)), [design]]))
    seed = 0 if args.seed is None else args.seed
    stop = int(np.ceil(np.log2(ns.max() / k1))) + 1
    out = {}
    for k, names in ((k1, ["fm85_icon", "fm85_hip"]), (k2, ["hll", "hll_hip"])):
        spec = CheckpointSpec(tuple(ns / k), stop)
        acc = accumulate(k, args.trials, spec, np.random.default_rng([seed, k]), names)
        out.update({e: np.sqrt(a.sxx.sum(axis=0) / a.count.sum()) for e, a in acc.items()})
    rows = [{"n": float(n), "fm85_icon_se": out["fm85_icon"][i], "hll_se": out["hll"][i],
             "ratio": out["hll"][i] / out["fm85_icon"][i], "fm85_hip_se": out["fm85_hip"][i],
             "hll_hip_se": out["hll_hip"][i], "hip_ratio": out["hll_hip"][i] / out["fm85_hip"][i]}
            for i, n in enumerate(ns)]
    meta = {"k_fm85": k1, "k_hll": k2, "trials": args.trials}
    meta.update(_size_summary(k1, k2, design, seed))
    emit(args, rows, meta)
    p = plot_path(args, "compare_hll.png")
    if p:
        from .plotting import plot_comparison
        plot_comparison(ns, {"HLL / FM85 ICON": [r["ratio"] for r in rows],
                             "HLL HIP / FM85 HIP": [r["hip_ratio"] for r in rows]}, p)
    return EXIT_OK


def _size_summary(k1: int, k2: int, n: float, seed: int, trials: int = 8) -> dict:
    """Mean stored bytes at stream length ``n``: FM85 file vs zlib'd HLL register array."""
    rng = np.random.default_rng(seed)
    stop = int(np.ceil(np.log2(n / k1))) + 1
    fm, hl = [], []
    for _ in range(trials):
        t = simulate_trace(SimulatorConfig(k1, min(stop + 11, 64), stop), rng)
        m = t.n <= n
        s = Fm85Sketch.from_coupons(SketchConfig(k1), t.rows[m], t.cols[m])
        fm.append(len(serialize(compress(s))))
        t = simulate_trace(SimulatorConfig(k2, min(stop + 11, 64), stop), rng)
        m = t.n <= n
        regs = np.zeros(k2, dtype=np.uint8)
        np.maximum.at(regs, t.rows[m], t.cols[m].astype(np.uint8))
        hl.append(len(ZlibAdapter().compress(regs.tobytes())))
    return {"fm85_bytes": float(np.mean(fm)), "hll_zlib_bytes": float(np.mean(hl))}


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--k", default=argparse.SUPPRESS, help="rows (power of two); fit also takes a..b")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="hash or simulation seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output path (default stdout)")
    common.add_argument("--format", choices=["csv", "json"], default=argparse.SUPPRESS)
    common.add_argument("--plot-dir", default=argparse.SUPPRESS, help="write PNG figures here")

    p = argparse.ArgumentParser(prog="fm85", description="FM85 sketches: build, estimate, merge, experiment.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--k", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--plot-dir", default=None)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("update", parents=[common], help="add a stream of items to a sketch file")
    s.add_argument("sketch")
    s.add_argument("--input", help="input path, '-' for stdin (default)")
    s.add_argument("--input-format", choices=["text", "u64"], default="text")
    s.add_argument("--buffer", type=int, default=BUFFER_CAPACITY)
    s.set_defaults(func=cmd_update)

    s = sub.add_parser("estimate", parents=[common], help="estimate the distinct count")
    s.add_argument("sketch")
    s.add_argument("--estimator", choices=["icon", "hip", "mdl", "all"], default="all")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("merge", parents=[common], help="union two sketch files (HIP is dropped)")
    s.add_argument("a")
    s.add_argument("b")
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("info", parents=[common], help="describe a sketch file")
    s.add_argument("sketch")
    s.set_defaults(func=cmd_info)

    s = sub.add_parser("entropy", parents=[common], help="per-row entropy curve and constant")
    s.add_argument("--kind", choices=["fm85", "hll", "both"], default="fm85")
    s.add_argument("--samples", type=int, default=4096)
    s.set_defaults(func=cmd_entropy)

    s = sub.add_parser("simulate", parents=[common], help="accelerated simulation with estimator replay")
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--checkpoints", help="comma-separated exponents e (n = k 2^e)")
    s.add_argument("--lo", type=float, default=0.0)
    s.add_argument("--hi", type=float, default=20.0)
    s.add_argument("--per-octave", type=int, default=2)
    s.add_argument("--estimators", help="comma-separated subset, e.g. fm85-hip,hll")
    s.add_argument("--num-columns", type=int)
    s.add_argument("--stop-exponent", type=int)
    s.add_argument("--summary", action="store_true", help="emit per-checkpoint standard errors")
    s.add_argument("--dump-trace", help="write the first trace as col,row,n lines")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", parents=[common], help="error or bias constant by 1/k extrapolation")
    s.add_argument("--estimator", required=True)
    s.add_argument("--kind", choices=["error", "bias"], default="error")
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--lo", type=int, default=20)
    s.add_argument("--hi", type=int, default=40)
    s.add_argument("--per-octave", type=int, default=4)
    s.add_argument("--points", help="CSV path for the (1/k, value) points")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("compare-hll", parents=[common], help="FM85 at k against HLL at 2k")
    s.add_argument("--scale", type=float, default=0.01, help="k_fm85 ~ 2^15 * scale")
    s.add_argument("--trials", type=int, default=2000)
    s.set_defaults(func=cmd_compare_hll)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fm85: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CorruptSketchError as exc:
        print(f"fm85: corrupt sketch: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (Refusal, HipUnavailableError, ConfigMismatchError) as exc:
        print(f"fm85: {exc}", file=sys.stderr)
        return EXIT_REFUSED


if __name__ == "__main__":
    sys.exit(main())
