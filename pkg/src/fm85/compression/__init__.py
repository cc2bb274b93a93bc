from .bitio import CorruptSketchError
from .codec import (ByteCompressor, CompressedSketch, ZlibAdapter, compress, decode_surprising,
                    decode_window, decompress, deserialize, dumps, encode_surprising,
                    encode_window, loads, phase_bucket, rotation_active, serialize, window_bytes)

__all__ = [
    "ByteCompressor", "CompressedSketch", "CorruptSketchError", "ZlibAdapter", "compress",
    "decode_surprising", "decode_window", "decompress", "deserialize", "dumps",
    "encode_surprising", "encode_window", "loads", "phase_bucket", "rotation_active",
    "serialize", "window_bytes",
]
