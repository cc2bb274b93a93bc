import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fm85.compression import (
    CompressedSketch, CorruptSketchError, ZlibAdapter, compress, decode_surprising, decode_window,
    decompress, deserialize, dumps, encode_surprising, encode_window, loads, phase_bucket,
    rotation_active, window_bytes,
)
from fm85.compression.bitio import BitReader, pack_codes
from fm85.compression.golomb import golomb_codes, golomb_decode, golomb_parameter
from fm85.compression.huffman import MAX_CODE_LENGTH, CanonicalCode, code_lengths
from fm85.coupons import CouponId, Fm85Sketch, SketchConfig
from fm85.entropy import finite_entropy
from fm85.simulator import SimulatorConfig, simulate_trace


def sketch_at(k, n, rng, hip=True):
    stop = max(int(np.ceil(np.log2(max(n, 1) / k))) + 1, 1)
    t = simulate_trace(SimulatorConfig(k, min(stop + 11, 64), stop), rng)
    m = t.n <= n
    return Fm85Sketch.from_coupons(SketchConfig(k), t.rows[m], t.cols[m], hip=hip)


# ------------------------------------------------------------- primitives

@given(st.lists(st.tuples(st.integers(1, 63), st.integers(0, 2 ** 63 - 1)), max_size=60))
def test_pack_codes_roundtrip(items):
    lens = np.array([L for L, _ in items], dtype=np.int64)
    codes = np.array([v & ((1 << L) - 1) for L, v in items], dtype=np.uint64)
    data, nbits = pack_codes(codes, lens)
    assert nbits == lens.sum() and len(data) == (nbits + 7) // 8
    r = BitReader(data)
    assert [r.bits(int(L)) for L in lens] == codes.tolist()
    r.check_padding()


def test_bit_reader_exhaustion():
    r = BitReader(b"\x80")
    assert r.bit() == 1
    r.bits(7)
    with pytest.raises(CorruptSketchError):
        r.bit()


@given(st.lists(st.floats(1e-9, 1.0), min_size=2, max_size=300))
def test_huffman_prefix_free_and_kraft(weights):
    lens = code_lengths(weights)
    assert lens.max() <= MAX_CODE_LENGTH
    assert np.sum(2.0 ** -lens.astype(float)) <= 1 + 1e-12
    code = CanonicalCode(lens)
    syms = np.arange(len(weights))
    data, _ = pack_codes(*code.encode(syms))
    r = BitReader(data)
    assert [code.decode_one(r) for _ in syms] == syms.tolist()


def test_huffman_optimal_on_dyadic():
    assert code_lengths([0.5, 0.25, 0.125, 0.125]).tolist() == [1, 2, 3, 3]


@given(st.integers(1, 5000), st.data())
def test_golomb_roundtrip(b, data):
    gaps = data.draw(st.lists(st.integers(0, 40 * b), max_size=100))
    payload, _ = pack_codes(*golomb_codes(np.array(gaps, dtype=np.int64), b))
    r = BitReader(payload)
    assert [golomb_decode(r, b) for _ in gaps] == gaps


def test_golomb_parameter_scales_with_sparsity():
    assert golomb_parameter(0.5) == 1
    assert golomb_parameter(1e-3) > golomb_parameter(1e-2) > 1


# --------------------------------------------------------------- payloads

def test_rotation_threshold():
    assert not rotation_active(33 * 16 // 10, 16)
    assert rotation_active(33 * 16 // 10 + 1, 16)


def test_phase_bucket_in_range():
    for C in (0, 10, 16 * 20, 16 * 60):
        b = phase_bucket(C, 16, 1 if C < 100 else 10)
        assert -128 <= b <= 1152


def test_surprising_roundtrip():
    k, off = 16, 3
    coupons = {CouponId(1, off + 32), CouponId(0, off + 40), CouponId(15, 64)}
    data = encode_surprising(coupons, off, k)
    assert decode_surprising(data, off, k) == coupons
    assert encode_surprising(set(), off, k) == b""
    with pytest.raises(ValueError):
        encode_surprising({CouponId(0, off + 31)}, off, k)


@pytest.mark.parametrize("k", [16, 64, 256])
@pytest.mark.parametrize("ratio", [0, 1, 10, 1000, 100000])
def test_roundtrip_exact(k, ratio):
    rng = np.random.default_rng(k + ratio)
    s = sketch_at(k, ratio * k, rng)
    cs = compress(s, 77)
    t = decompress(cs)
    assert t == s
    assert compress(t, 77) == cs
    u, seed = loads(dumps(s, 5))
    assert u == s and seed == 5


def test_roundtrip_merged_sketch():
    rng = np.random.default_rng(1)
    s = sketch_at(64, 5000, rng, hip=False)
    data = dumps(s)
    cs = deserialize(data)
    assert not cs.hip_valid
    assert loads(data)[0] == s


def test_roundtrip_with_window_offset_zero():
    cfg = SketchConfig(16)
    s = Fm85Sketch.from_window(cfg, 0, np.full(16, 6, dtype=np.uint32), set(), 40.0)
    assert loads(dumps(s))[0].same_collected(s)


def test_row_layout_roundtrip_and_cost():
    rng = np.random.default_rng(2)
    s = sketch_at(1024, 1024 * 2.0 ** 12, rng)
    col = encode_window(s)
    row = encode_window(s, "row")
    C = s.collected_count
    words = decode_window(row, s.config, C, rotation_active(C, s.k), "row")
    assert np.array_equal(words, decode_window(col, s.config, C, rotation_active(C, s.k)))
    assert len(row) > 2 * len(col)
    with pytest.raises(ValueError):
        encode_window(s, "diagonal")


def test_zlib_adapter_roundtrip_and_layouts():
    rng = np.random.default_rng(3)
    s = sketch_at(1024, 1024 * 2.0 ** 12, rng)
    cs = compress(s, adapter=ZlibAdapter())
    assert cs.external
    assert decompress(cs, ZlibAdapter()) == s
    with pytest.raises(CorruptSketchError):
        decompress(cs)
    z_col = len(zlib.compress(window_bytes(s, True), 9))
    z_row = len(zlib.compress(window_bytes(s, False), 9))
    assert z_col < z_row
    assert len(encode_window(s)) < z_col


def test_size_between_entropy_and_five_bits():
    rng = np.random.default_rng(4)
    k, n = 4096, 2.0 ** 30
    s = sketch_at(k, n, rng)
    bits = compress(s).bits_per_row()
    assert finite_entropy(n, SketchConfig(k)) / k <= bits <= 5.0


# --------------------------------------------------------------- corruption

@pytest.fixture(scope="module")
def sample_bytes():
    return dumps(sketch_at(64, 64 * 300, np.random.default_rng(5)))


@settings(max_examples=80, deadline=None)
@given(st.data())
def test_any_byte_flip_is_detected(sample_bytes, data):
    i = data.draw(st.integers(0, len(sample_bytes) - 1))
    bit = data.draw(st.integers(0, 7))
    bad = bytearray(sample_bytes)
    bad[i] ^= 1 << bit
    with pytest.raises(CorruptSketchError):
        loads(bytes(bad))


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_truncation_and_padding_detected(sample_bytes, data):
    cut = data.draw(st.integers(0, len(sample_bytes) - 1))
    with pytest.raises(CorruptSketchError):
        loads(sample_bytes[:cut])
    with pytest.raises(CorruptSketchError):
        loads(sample_bytes + b"\x00")


def reseal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def test_bad_header_fields_with_valid_crc(sample_bytes):
    body = bytearray(sample_bytes[:-4])
    for pos, val in ((4, 9), (6, 2), (7, 0), (5, 0x80)):
        b = bytearray(body)
        b[pos] = val
        with pytest.raises(CorruptSketchError):
            loads(reseal(bytes(b)))
    with pytest.raises(CorruptSketchError):
        loads(b"XXXX" + sample_bytes[4:])


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_payload_damage_never_escapes_as_other_errors(sample_bytes, data):
    cs = deserialize(sample_bytes)
    w = bytearray(cs.window_payload)
    i = data.draw(st.integers(2, len(w) - 1))
    w[i] ^= 1 << data.draw(st.integers(0, 7))
    damaged = CompressedSketch(cs.flags, cs.log2_k, cs.max_col, cs.window_offset, cs.collected_count,
                               cs.hash_seed, cs.hip_accumulator, cs.hip_remaining, bytes(w),
                               cs.surprising_payload)
    try:
        out = decompress(damaged)
    except CorruptSketchError:
        return
    # a flip that still decodes must give a self-consistent sketch
    assert out.collected_count == cs.collected_count


def test_count_mismatch_detected(sample_bytes):
    cs = deserialize(sample_bytes)
    bad = CompressedSketch(cs.flags, cs.log2_k, cs.max_col, cs.window_offset, cs.collected_count + 1,
                           cs.hash_seed, cs.hip_accumulator, cs.hip_remaining, cs.window_payload,
                           cs.surprising_payload)
    with pytest.raises(CorruptSketchError):
        decompress(bad)
    with pytest.raises(CorruptSketchError):
        decompress(CompressedSketch(**{**cs.__dict__, "version": 2}))
