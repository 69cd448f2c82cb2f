"""Bit-exact tensor archive used for checkpoints and partial weight import.

Layout: magic "AMBA" | u32 version=1 | u32 entry count | per entry:
u32 name length, UTF-8 name, u8 dtype code (0 = f32), u8 rank,
rank x u64 dims, raw little-endian payload | trailing u64 CRC32 of all
preceding bytes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"AMBA"
VERSION = 1
DTYPE_F32 = 0
CONFIG_KEY = "__config__"


class CheckpointFormatError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write an ordered name -> array map; arrays are stored as f32."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<Q", crc))


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 + 8:
        raise CheckpointFormatError("archive truncated before header")
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    body, (crc,) = raw[:-8], struct.unpack("<Q", raw[-8:])
    if (zlib.crc32(body) & 0xFFFFFFFF) != crc:
        raise CheckpointFormatError("CRC mismatch: archive corrupted")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 12
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            dtype_code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
        except struct.error as e:
            raise CheckpointFormatError(f"truncated entry header at offset {pos}") from e
        if dtype_code != DTYPE_F32:
            raise CheckpointFormatError(f"unknown dtype code {dtype_code} for '{name}'")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(body):
            raise CheckpointFormatError(f"truncated payload for '{name}'")
        out[name] = np.frombuffer(body[pos:pos + nbytes], dtype="<f4").reshape(dims).copy()
        pos += nbytes
    if pos != len(body):
        raise CheckpointFormatError(f"{len(body) - pos} trailing bytes after last entry")
    return out


@dataclass
class LoadReport:
    loaded: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)    # wanted by the model, absent in archive
    unexpected: list[str] = field(default_factory=list)  # present in archive, unused
    shape_conflicts: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not (self.missing or self.unexpected or self.shape_conflicts)


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")
