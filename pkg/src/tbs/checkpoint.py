"""Binary parameter checkpoints ("TBSC").

Layout, all integers little-endian:

    magic "TBSC" | version u32 | entry count u32
    per entry:
        name length u32 | name bytes (utf-8)
        rank u32 | extents u64 x rank
        payload: float32 x prod(extents), little-endian
    trailer: CRC-32 (u32) over all payload bytes in file order

The round trip is bit-exact for float32 parameters; the CRC is verified on
load and any mismatch, bad magic, or truncation raises ``CheckpointError``.
"""

from __future__ import annotations

import struct
import zlib
from typing import Dict

import numpy as np

MAGIC = b"TBSC"
VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt, truncated, or inconsistent."""


def save_checkpoint(path, named: Dict[str, np.ndarray]) -> None:
    crc = 0
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(named)))
        for name, arr in named.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            payload = a.tobytes()
            crc = zlib.crc32(payload, crc)
            fh.write(payload)
        fh.write(struct.pack("<I", crc & 0xFFFFFFFF))


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, "
                              f"got {len(buf)}")
    return buf


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e
    with fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"bad checkpoint magic in {path}")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        out: Dict[str, np.ndarray] = {}
        crc = 0
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            extents = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            size = 1
            for e in extents:
                size *= e
            payload = _read_exact(fh, 4 * size)
            crc = zlib.crc32(payload, crc)
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(extents).copy()
        (stored,) = struct.unpack("<I", _read_exact(fh, 4))
        if stored != (crc & 0xFFFFFFFF):
            raise CheckpointError(
                f"checkpoint CRC mismatch in {path}: stored {stored:#010x}, "
                f"computed {crc & 0xFFFFFFFF:#010x}")
        return out


def apply_checkpoint(named_params, loaded: Dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into the model's parameter tensors by name."""
    missing = set(named_params) - set(loaded)
    extra = set(loaded) - set(named_params)
    if missing or extra:
        raise CheckpointError(
            f"checkpoint does not match model: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}")
    for name, tensor in named_params.items():
        arr = loaded[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"checkpoint entry {name}: shape {arr.shape} vs model "
                f"{tensor.data.shape}")
        tensor.data = arr.astype(np.float32)
