import csv
import io
import json

import numpy as np
import pytest

from fm85.cli import BUFFER_CAPACITY, UpdateBuffer, compare_sizes, main, parse_k_range
from fm85.compression import compress, deserialize, loads
from fm85.coupons import Fm85Sketch, SketchConfig


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def write_items(path, values):
    path.write_text("".join(f"item-{v}\n" for v in values))
    return path


def rows_of(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_update_estimate_info(tmp_path, capsys):
    items = write_items(tmp_path / "a.txt", range(20000))
    sk = tmp_path / "a.fm85"
    code, out, _ = run(capsys, "--k", "256", "update", str(sk), "--input", str(items))
    assert code == 0 and rows_of(out)[0]["items"] == "20000"
    code, out, _ = run(capsys, "estimate", str(sk))
    est = rows_of(out)[0]
    for name in ("icon", "hip", "mdl"):
        assert abs(float(est[name]) / 20000 - 1) < 0.2
    code, out, _ = run(capsys, "info", str(sk), "--format", "json")
    info = json.loads(out)[0]
    assert info["k"] == 256 and info["hash_seed"] == 9001 and info["hip_valid"]


def test_update_appends_and_ignores_duplicates(tmp_path, capsys):
    sk = tmp_path / "s.fm85"
    a = write_items(tmp_path / "a.txt", range(5000))
    b = write_items(tmp_path / "b.txt", range(2500, 7500))
    assert main(["--k", "64", "update", str(sk), "--input", str(a)]) == 0
    assert main(["update", str(sk), "--input", str(b)]) == 0
    once = tmp_path / "once.fm85"
    c = write_items(tmp_path / "c.txt", list(range(5000)) + list(range(2500, 7500)))
    assert main(["--k", "64", "update", str(once), "--input", str(c)]) == 0
    capsys.readouterr()
    assert loads(sk.read_bytes())[0] == loads(once.read_bytes())[0]


def test_u64_input(tmp_path, capsys):
    raw = tmp_path / "x.bin"
    raw.write_bytes(np.arange(1, 3001, dtype="<u8").tobytes())
    sk = tmp_path / "x.fm85"
    assert main(["--k", "64", "update", str(sk), "--input", str(raw), "--input-format", "u64"]) == 0
    raw.write_bytes(b"1234567")
    assert main(["update", str(sk), "--input", str(raw), "--input-format", "u64"]) == 2
    capsys.readouterr()


def test_buffer_size_does_not_change_result(tmp_path, capsys):
    items = write_items(tmp_path / "a.txt", range(1200))
    out = []
    for buf in ("1", "7", str(BUFFER_CAPACITY)):
        sk = tmp_path / f"b{buf}.fm85"
        assert main(["--k", "16", "update", str(sk), "--input", str(items), "--buffer", buf]) == 0
        out.append(sk.read_bytes())
    capsys.readouterr()
    assert out[0] == out[1] == out[2]


def test_update_buffer_discards_left_of_window():
    cfg = SketchConfig(16)
    s = Fm85Sketch(cfg, window_offset=1)
    for r in range(16):
        s.update(r, 1)
    buf = UpdateBuffer(compress(s), capacity=4)
    buf.offer(3, 1)
    assert buf.discarded == 1 and not buf.rows
    for r in range(4):
        buf.offer(r, 2)
    assert buf.flushes == 1 and not buf.rows


def test_deterministic_output(tmp_path, capsys):
    items = write_items(tmp_path / "a.txt", range(4000))
    blobs = []
    for i in range(2):
        sk = tmp_path / f"d{i}.fm85"
        main(["--k", "128", "--seed", "42", "update", str(sk), "--input", str(items)])
        blobs.append(sk.read_bytes())
    capsys.readouterr()
    assert blobs[0] == blobs[1]
    assert deserialize(blobs[0]).hash_seed == 42


def test_seed_and_k_mismatch_refused(tmp_path, capsys):
    items = write_items(tmp_path / "a.txt", range(100))
    sk = tmp_path / "s.fm85"
    main(["--k", "64", "update", str(sk), "--input", str(items)])
    assert main(["--k", "128", "update", str(sk), "--input", str(items)]) == 4
    assert main(["--seed", "1", "update", str(sk), "--input", str(items)]) == 4
    capsys.readouterr()


def test_merge_and_hip_refusal(tmp_path, capsys):
    a, b, m = tmp_path / "a.fm85", tmp_path / "b.fm85", tmp_path / "m.fm85"
    main(["--k", "64", "update", str(a), "--input", str(write_items(tmp_path / "a.txt", range(3000)))])
    main(["--k", "64", "update", str(b), "--input", str(write_items(tmp_path / "b.txt", range(2000, 6000)))])
    assert main(["merge", str(a), str(b), "--out", str(m)]) == 0
    capsys.readouterr()
    code, out, _ = run(capsys, "estimate", str(m))
    assert code == 0 and rows_of(out)[0]["hip"] == "unavailable"
    code, _, err = run(capsys, "estimate", str(m), "--estimator", "hip")
    assert code == 4 and "merged" in err
    c = tmp_path / "c.fm85"
    main(["--k", "128", "update", str(c), "--input", str(tmp_path / "a.txt")])
    assert main(["merge", str(a), str(c), "--out", str(m)]) == 4
    assert main(["merge", str(a), str(b)]) == 2
    capsys.readouterr()


def test_corrupt_file_exit_code(tmp_path, capsys):
    sk = tmp_path / "s.fm85"
    main(["--k", "64", "update", str(sk), "--input", str(write_items(tmp_path / "a.txt", range(500)))])
    data = bytearray(sk.read_bytes())
    data[30] ^= 0x10
    sk.write_bytes(bytes(data))
    code, _, err = run(capsys, "estimate", str(sk))
    assert code == 3 and "corrupt" in err
    before = sk.read_bytes()
    assert main(["update", str(sk), "--input", str(tmp_path / "a.txt")]) == 3
    assert sk.read_bytes() == before
    capsys.readouterr()


def test_usage_errors(tmp_path, capsys):
    assert main(["estimate", str(tmp_path / "missing")]) == 2
    assert main(["--k", "100", "update", str(tmp_path / "x")]) == 2
    assert main(["nosuchcommand"]) == 2
    assert main(["fit", "--estimator", "bogus", "--k", "16..128"]) == 2
    assert not (tmp_path / "x").exists()
    capsys.readouterr()


def test_entropy_command(tmp_path, capsys):
    code, out, _ = run(capsys, "entropy", "--plot-dir", str(tmp_path))
    assert code == 0
    assert "4.699204" in out.strip().splitlines()[-1]
    assert (tmp_path / "entropy.png").stat().st_size > 0
    code, out, _ = run(capsys, "entropy", "--kind", "hll", "--format", "json")
    assert json.loads(out)["mean_hll"] == pytest.approx(2.831952664, abs=1e-6)


def test_simulate_command(tmp_path, capsys):
    trace = tmp_path / "trace.txt"
    code, out, _ = run(capsys, "--k", "32", "--seed", "3", "simulate", "--trials", "5", "--lo", "0", "--hi", "6",
                       "--estimators", "fm85-icon,hll-hip", "--dump-trace", str(trace))
    assert code == 0
    rows = rows_of(out)
    assert len(rows) == 5 * 13 and set(rows[0]) == {"trial", "n", "fm85_icon", "hll_hip"}
    assert trace.read_text().count("\n") > 10
    code, again, _ = run(capsys, "--k", "32", "--seed", "3", "simulate", "--trials", "5", "--lo", "0", "--hi", "6",
                         "--estimators", "fm85-icon,hll-hip")
    assert again == out
    code, out, _ = run(capsys, "--k", "32", "simulate", "--trials", "50", "--summary",
                       "--checkpoints", "2,4,8", "--plot-dir", str(tmp_path))
    assert len(rows_of(out)) == 3 and (tmp_path / "simulate.png").exists()


def test_fit_command(tmp_path, capsys):
    out = tmp_path / "fit.json"
    argv = ["fit", "--estimator", "fm85-icon", "--k", "16..128", "--trials", "100", "--seed", "7",
            "--lo", "10", "--hi", "11", "--per-octave", "1", "--out", str(out), "--plot-dir", str(tmp_path)]
    assert main(argv) == 0
    res = json.loads(out.read_text())
    assert res["k"] == [16, 32, 64, 128] and "c0" in res and len(res["points"]) == 4
    pts = rows_of((tmp_path / "fit.points.csv").read_text())
    assert float(pts[0]["inv_k"]) == 1 / 16
    first = out.read_text()
    assert main(argv) == 0
    assert out.read_text() == first
    assert (tmp_path / "fit_fm85_icon_error.png").exists()
    capsys.readouterr()


def test_compare_hll_command(tmp_path, capsys):
    assert compare_sizes(1.0) == (1 << 15, 1 << 16)
    assert compare_sizes(0.01) == (256, 512)
    assert compare_sizes(1e-6) == (16, 32)
    code, out, _ = run(capsys, "compare-hll", "--scale", "0.001", "--trials", "100", "--plot-dir", str(tmp_path))
    assert code == 0
    lines = out.strip().splitlines()
    assert "k_fm85,32" in lines and "k_hll,64" in lines
    assert (tmp_path / "compare_hll.png").exists()


def test_parse_k_range():
    assert parse_k_range("16..512") == [16, 32, 64, 128, 256, 512]
    assert parse_k_range("16,64") == [16, 64]
