"""Sketch compression and the ``.fm85`` container.

Window layout: each row's 32 window bits form a word with bit 0 the leftmost
window column.  Once ``C > floor(3.3 k)`` the word is rotated right by one so
the mostly-full leftmost column moves to the top byte.  Words are split into
4 bytes and laid out column-major: every row's byte 0, then every byte 1, and
so on.

Each byte column is coded with a canonical Huffman code over run-length
tokens (a zero run of 0..15 plus a nonzero byte, a 16-zero escape, and an
end-of-column marker).  Before tokenising, each byte is XORed with its most
likely value so that mostly-full columns also become mostly zero.  The byte
distribution comes from the cell model ``q_w = 1 - exp(-2**(phase - w))``
with ``phase = log2(n_hat / k) - offset`` quantised to 1/16; the quantised
phase is stored in the payload, and code tables are built on first use and
cached.

Surprising coupons are sorted by (col, row), linearised, and their gaps
Golomb-coded.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol

import numpy as np

from ..coupons import WINDOW, CouponId, Fm85Sketch, SketchConfig
from ..estimators import icon_estimate
from ..hashing import DEFAULT_SEED
from .bitio import BitReader, CorruptSketchError, pack_codes
from .golomb import golomb_codes, golomb_decode, golomb_parameter
from .huffman import CanonicalCode

MAGIC = b"FM85"
VERSION = 1
FLAG_ROTATED = 1
FLAG_HIP = 2
FLAG_EXTERNAL = 4

PHASE_STEPS = 16
PHASE_MIN = -8 * PHASE_STEPS
PHASE_MAX = 72 * PHASE_STEPS
RUN_LIMIT = 16
ZRL = RUN_LIMIT * 256
EOB = ZRL + 1
ALPHABET = EOB + 1
PROB_FLOOR = 2.0 ** -40

_BYTE_BITS = ((np.arange(256)[:, None] >> np.arange(8)) & 1).astype(bool)


class ByteCompressor(Protocol):
    def compress(self, data: bytes) -> bytes: ...
    def decompress(self, data: bytes) -> bytes: ...


class ZlibAdapter:
    """General-purpose byte compressor standing in for an external library."""

    def __init__(self, level: int = 9):
        self.level = level

    def compress(self, data: bytes) -> bytes:
        return zlib.compress(data, self.level)

    def decompress(self, data: bytes) -> bytes:
        try:
            return zlib.decompress(data)
        except zlib.error as exc:
            raise CorruptSketchError(str(exc)) from exc


def rotation_active(collected_count: int, k: int) -> bool:
    return collected_count > (33 * k) // 10


def _row_words(sketch: Fm85Sketch, rotated: bool) -> np.ndarray:
    w = sketch.window.astype(np.uint32)
    if rotated:
        w = (w >> np.uint32(1)) | ((w & np.uint32(1)) << np.uint32(WINDOW - 1))
    return w


def window_bytes(sketch: Fm85Sketch, column_major: bool = True) -> bytes:
    """The 4k window bytes after conditional rotation."""
    words = _row_words(sketch, rotation_active(sketch.collected_count, sketch.k))
    b = words.astype("<u4").view(np.uint8).reshape(-1, 4)
    return (b.T if column_major else b).tobytes()


def _words_from_bytes(data: np.ndarray, rotated: bool) -> np.ndarray:
    w = data.reshape(4, -1).T.copy().view("<u4").ravel().astype(np.uint32)
    if rotated:
        w = (w << np.uint32(1)) | (w >> np.uint32(WINDOW - 1))
    return w


# ---------------------------------------------------------------- the model

def phase_bucket(collected_count: int, k: int, window_offset: int, max_col: int = 64) -> int:
    if collected_count == 0:
        return PHASE_MIN
    n_hat = icon_estimate(collected_count, k, max_col)
    if not math.isfinite(n_hat):
        return PHASE_MAX
    b = round(PHASE_STEPS * (math.log2(n_hat / k) - window_offset))
    return int(min(max(b, PHASE_MIN), PHASE_MAX))


def _window_column_probs(bucket: int) -> np.ndarray:
    w = np.arange(WINDOW)
    return -np.expm1(-np.exp2(bucket / PHASE_STEPS - w))


def _byte_columns(rotated: bool) -> np.ndarray:
    """Window column held by each bit of each byte, shape (4, 8)."""
    word_bit = np.arange(WINDOW).reshape(4, 8)
    return (word_bit + 1) % WINDOW if rotated else word_bit


@lru_cache(maxsize=None)
def _byte_model(bucket: int, rotated: bool) -> tuple[np.ndarray, np.ndarray]:
    """Per byte column: the XOR mask and the distribution of masked bytes."""
    q = _window_column_probs(bucket)[_byte_columns(rotated)]
    masks = np.zeros(4, dtype=np.uint8)
    dists = np.zeros((4, 256))
    for b in range(4):
        mode = q[b] > 0.5
        masks[b] = int((mode * (1 << np.arange(8))).sum())
        flip = np.where(mode, 1 - q[b], q[b])
        p = np.where(_BYTE_BITS, flip, 1 - flip).prod(axis=1)
        dists[b] = p / p.sum()
    return masks, dists


def _token_weights(dist: np.ndarray, rows: int) -> np.ndarray:
    p0 = dist[0]
    w = np.zeros(ALPHABET)
    runs = p0 ** np.arange(RUN_LIMIT)
    tok = np.outer(runs, dist)
    tok[:, 0] = 0.0
    w[:ZRL] = tok.ravel()
    w[ZRL] = p0 ** RUN_LIMIT
    w[EOB] = 1.0 / max(rows, 1)
    w = w / w.sum()
    live = np.ones(ALPHABET, dtype=bool)
    live[np.arange(0, ZRL, 256)] = False
    return np.where(live, np.maximum(w, PROB_FLOOR), 0.0)


@lru_cache(maxsize=None)
def _table(bucket: int, rotated: bool, column: int, log2_rows: int) -> CanonicalCode:
    _, dists = _byte_model(bucket, rotated)
    dist = dists.mean(axis=0) if column < 0 else dists[column]
    return CanonicalCode.from_weights(_token_weights(dist, 1 << log2_rows))


def _tokenize(values: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(values)
    gaps = np.diff(np.concatenate([[-1], nz])) - 1
    esc = gaps // RUN_LIMIT
    total = int((esc + 1).sum())
    tokens = np.full(total, ZRL, dtype=np.int64)
    at = np.cumsum(esc + 1) - 1
    tokens[at] = (gaps % RUN_LIMIT) * 256 + values[nz]
    if nz.size == 0 or nz[-1] != values.size - 1:
        tokens = np.append(tokens, EOB)
    return tokens


def _detokenize(reader: BitReader, code: CanonicalCode, rows: int) -> np.ndarray:
    out = np.zeros(rows, dtype=np.uint8)
    r = 0
    while r < rows:
        s = code.decode_one(reader)
        if s == EOB:
            break
        if s == ZRL:
            r += RUN_LIMIT
            if r >= rows:
                raise CorruptSketchError("zero run past end of column")
            continue
        r += s // 256
        if r >= rows:
            raise CorruptSketchError("token past end of column")
        out[r] = s % 256
        r += 1
    return out


def encode_window(sketch: Fm85Sketch, layout: str = "column") -> bytes:
    """Entropy-code the window.

    ``layout="column"`` is the stored format.  ``layout="row"`` codes the
    row-major byte stream with a single position-blind table (the mixture of
    the four byte-column models); it exists for comparison only.
    """
    k, C = sketch.k, sketch.collected_count
    rotated = rotation_active(C, k)
    bucket = phase_bucket(C, k, sketch.window_offset, sketch.config.max_col)
    raw = np.frombuffer(window_bytes(sketch, layout == "column"), dtype=np.uint8)
    parts = []
    if layout == "column":
        masks, _ = _byte_model(bucket, rotated)
        cols = raw.reshape(4, k)
        for b in range(4):
            code = _table(bucket, rotated, b, sketch.config.log2_k)
            parts.append(code.encode(_tokenize(cols[b] ^ masks[b])))
    elif layout == "row":
        code = _table(bucket, rotated, -1, sketch.config.log2_k + 2)
        parts.append(code.encode(_tokenize(raw)))
    else:
        raise ValueError(f"unknown layout {layout!r}")
    codes = np.concatenate([c for c, _ in parts])
    lens = np.concatenate([n for _, n in parts])
    body, _ = pack_codes(codes, lens)
    return struct.pack("<h", bucket) + body


def decode_window(payload: bytes, config: SketchConfig, collected_count: int,
                  rotated: bool, layout: str = "column") -> np.ndarray:
    """Inverse of :func:`encode_window`; returns the per-row window words."""
    if len(payload) < 2:
        raise CorruptSketchError("window payload too short")
    (bucket,) = struct.unpack_from("<h", payload)
    if not PHASE_MIN <= bucket <= PHASE_MAX:
        raise CorruptSketchError("bad phase bucket")
    k = config.k
    reader = BitReader(payload[2:])
    if layout == "column":
        masks, _ = _byte_model(bucket, rotated)
        cols = [_detokenize(reader, _table(bucket, rotated, b, config.log2_k), k) ^ masks[b]
                for b in range(4)]
        data = np.concatenate(cols)
    else:
        rowmajor = _detokenize(reader, _table(bucket, rotated, -1, config.log2_k + 2), 4 * k)
        data = rowmajor.reshape(k, 4).T.ravel()
    reader.check_padding()
    return _words_from_bytes(data, rotated)


# -------------------------------------------------------------- surprising

def encode_surprising(coupons, window_offset: int, k: int) -> bytes:
    """Golomb-code the gaps between linearised surprising coupons.

    Header: count and Golomb parameter as unsigned 32-bit integers.
    """
    coupons = sorted(coupons, key=lambda c: (c.col, c.row))
    if not coupons:
        return b""
    base = window_offset + WINDOW
    idx = np.array([(c.col - base) * k + c.row for c in coupons], dtype=np.int64)
    if idx[0] < 0 or np.any(np.array([c.row for c in coupons]) >= k):
        raise ValueError("surprising coupon inside or left of the window")
    b = golomb_parameter(len(coupons) / (WINDOW * k))
    gaps = np.diff(np.concatenate([[-1], idx])) - 1
    body, _ = pack_codes(*golomb_codes(gaps, b))
    return struct.pack("<II", len(coupons), b) + body


def decode_surprising(data: bytes, window_offset: int, k: int) -> set[CouponId]:
    if not data:
        return set()
    if len(data) < 8:
        raise CorruptSketchError("surprising payload too short")
    count, b = struct.unpack_from("<II", data)
    if b < 1 or count > 64 * k:
        raise CorruptSketchError("bad surprising header")
    reader = BitReader(data[8:])
    base = window_offset + WINDOW
    out = set()
    idx = -1
    for _ in range(count):
        idx += golomb_decode(reader, b) + 1
        out.add(CouponId(idx % k, base + idx // k))
    reader.check_padding()
    return out


# --------------------------------------------------------------- container

@dataclass(frozen=True)
class CompressedSketch:
    flags: int
    log2_k: int
    max_col: int
    window_offset: int
    collected_count: int
    hash_seed: int
    hip_accumulator: float
    hip_remaining: float
    window_payload: bytes
    surprising_payload: bytes
    version: int = VERSION

    @property
    def rotated(self) -> bool:
        return bool(self.flags & FLAG_ROTATED)

    @property
    def hip_valid(self) -> bool:
        return bool(self.flags & FLAG_HIP)

    @property
    def external(self) -> bool:
        return bool(self.flags & FLAG_EXTERNAL)

    @property
    def k(self) -> int:
        return 1 << self.log2_k

    @property
    def config(self) -> SketchConfig:
        return SketchConfig(self.k, self.max_col)

    def size_bits(self) -> int:
        return 8 * len(serialize(self))

    def bits_per_row(self) -> float:
        return self.size_bits() / self.k


def compress(sketch: Fm85Sketch, hash_seed: int = DEFAULT_SEED,
             adapter: ByteCompressor | None = None) -> CompressedSketch:
    cfg = sketch.config
    rotated = rotation_active(sketch.collected_count, cfg.k)
    flags = (FLAG_ROTATED if rotated else 0) | (FLAG_HIP if sketch.hip_valid else 0)
    if adapter is not None:
        flags |= FLAG_EXTERNAL
        window = adapter.compress(window_bytes(sketch))
    else:
        window = encode_window(sketch)
    hip_a = sketch.hip_accumulator if sketch.hip_valid else 0.0
    hip_r = sketch.hip_remaining if sketch.hip_valid else 0.0
    return CompressedSketch(flags, cfg.log2_k, cfg.max_col, sketch.window_offset,
                            sketch.collected_count, hash_seed, hip_a, hip_r, window,
                            encode_surprising(sketch.surprising, sketch.window_offset, cfg.k))


def decompress(cs: CompressedSketch, adapter: ByteCompressor | None = None) -> Fm85Sketch:
    if cs.version != VERSION:
        raise CorruptSketchError(f"unsupported version {cs.version}")
    cfg = cs.config
    if cs.external:
        if adapter is None:
            raise CorruptSketchError("sketch needs an external byte compressor")
        data = np.frombuffer(adapter.decompress(cs.window_payload), dtype=np.uint8)
        if data.size != 4 * cfg.k:
            raise CorruptSketchError("bad window size")
        words = _words_from_bytes(data, cs.rotated)
    else:
        words = decode_window(cs.window_payload, cfg, cs.collected_count, cs.rotated)
    surprising = decode_surprising(cs.surprising_payload, cs.window_offset, cfg.k)
    try:
        sketch = Fm85Sketch.from_window(cfg, cs.window_offset, words, surprising,
                                        cs.hip_accumulator if cs.hip_valid else None)
    except ValueError as exc:
        raise CorruptSketchError(str(exc)) from exc
    if sketch.collected_count != cs.collected_count:
        raise CorruptSketchError("collected count does not match payload")
    if cs.hip_valid and sketch.hip_remaining != cs.hip_remaining:
        raise CorruptSketchError("HIP remaining probability does not match payload")
    return sketch


_HEAD = struct.Struct("<4sBBBBBQQ")


def serialize(cs: CompressedSketch) -> bytes:
    out = bytearray(_HEAD.pack(MAGIC, cs.version, cs.flags, cs.log2_k, cs.max_col,
                               cs.window_offset, cs.collected_count, cs.hash_seed))
    if cs.hip_valid:
        out += struct.pack("<dd", cs.hip_accumulator, cs.hip_remaining)
    for payload in (cs.window_payload, cs.surprising_payload):
        out += struct.pack("<I", len(payload)) + payload
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def deserialize(data: bytes) -> CompressedSketch:
    if len(data) < _HEAD.size + 12:
        raise CorruptSketchError("truncated sketch")
    if data[:4] != MAGIC:
        raise CorruptSketchError("bad magic")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptSketchError("checksum mismatch")
    _, version, flags, log2_k, max_col, offset, C, seed = _HEAD.unpack_from(data)
    if version != VERSION:
        raise CorruptSketchError(f"unsupported version {version}")
    if not 4 <= log2_k <= 40 or not 1 <= max_col <= 64 or flags & ~7:
        raise CorruptSketchError("bad header")
    pos = _HEAD.size
    hip_a = hip_r = 0.0
    body = data[:-4]
    try:
        if flags & FLAG_HIP:
            hip_a, hip_r = struct.unpack_from("<dd", body, pos)
            pos += 16
        payloads = []
        for _ in range(2):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            if pos + n > len(body):
                raise CorruptSketchError("truncated payload")
            payloads.append(bytes(body[pos:pos + n]))
            pos += n
    except struct.error as exc:
        raise CorruptSketchError("truncated sketch") from exc
    if pos != len(body):
        raise CorruptSketchError("trailing bytes")
    return CompressedSketch(flags, log2_k, max_col, offset, C, seed, hip_a, hip_r,
                            payloads[0], payloads[1], version)


def dumps(sketch: Fm85Sketch, hash_seed: int = DEFAULT_SEED) -> bytes:
    return serialize(compress(sketch, hash_seed))


def loads(data: bytes) -> tuple[Fm85Sketch, int]:
    cs = deserialize(data)
    return decompress(cs), cs.hash_seed


__all__ = [
    "CompressedSketch", "CorruptSketchError", "ZlibAdapter", "ByteCompressor", "window_bytes",
    "encode_window", "decode_window", "encode_surprising", "decode_surprising", "compress",
    "decompress", "serialize", "deserialize", "dumps", "loads", "rotation_active", "phase_bucket",
]
