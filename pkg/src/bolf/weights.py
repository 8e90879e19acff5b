"""Bit-exact binary serialization for named parameter tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"BOLF"
    version u32      currently 1
    count   u32      number of tensors
    per tensor:
        name_len u32, name UTF-8 bytes
        rank     u32
        dims     rank x u64
        payload  prod(dims) x f32, row-major
    crc32   u32      checksum of every preceding byte

Floats are stored as f32, so saving float64 parameters quantizes them;
callers that need save -> load -> evaluate to be bit-exact should push
their parameters through :func:`roundtrip_f32` first.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"BOLF"
VERSION = 1


class WeightsError(ValueError):
    """Corrupt, truncated, or unsupported weights file."""


def save_weights(path, named: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(named))
    for name, arr in named.items():
        # asarray (not ascontiguousarray) so rank-0 arrays keep their shape
        arr = np.asarray(arr, dtype="<f4", order="C")
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded)) + encoded
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
        blob += arr.tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(blob))


def load_weights(path) -> dict[str, np.ndarray]:
    """Returns name -> float32 array in file order; verifies the checksum."""
    path = Path(path)
    if not path.exists():
        raise WeightsError(f"weights file not found: {path}")
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 12:
        raise WeightsError(f"file too short to be a weights file ({len(data)} bytes)")
    if data[:4] != MAGIC:
        raise WeightsError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    stored_crc = struct.unpack_from("<I", data, len(data) - 4)[0]
    actual_crc = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise WeightsError(f"checksum mismatch: stored {stored_crc:#010x}, "
                           f"computed {actual_crc:#010x}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise WeightsError(f"unsupported format version {version}")
    pos = 12
    end = len(data) - 4

    def need(n: int):
        if pos + n > end:
            raise WeightsError("truncated weights file")

    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(4)
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        need(name_len)
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        need(4)
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        need(8 * rank)
        dims = struct.unpack_from(f"<{rank}Q", data, pos) if rank else ()
        pos += 8 * rank
        n_vals = int(np.prod(dims, dtype=np.int64)) if rank else 1
        need(4 * n_vals)
        arr = np.frombuffer(data, dtype="<f4", count=n_vals, offset=pos).reshape(dims)
        pos += 4 * n_vals
        if name in out:
            raise WeightsError(f"duplicate tensor name {name!r}")
        out[name] = arr.copy()
    if pos != end:
        raise WeightsError(f"{end - pos} unexpected trailing bytes before checksum")
    return out


def roundtrip_f32(named: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Quantize float64 arrays through f32 so in-memory values match what a
    save/load cycle would produce."""
    return {k: np.asarray(v).astype(np.float32).astype(np.float64) for k, v in named.items()}
