"""RADF binary tensor file format.

Layout (all integers little-endian):

    magic   4 bytes  b"RADF"
    version u16      1
    kind    u8       1=long feature, 2=short feature, 3=layer embedding
    L       u32      number of layers
    T       u32      number of frames (1 for embeddings)
    F       u32      feature dimension
    payload L*T*F float32, layer-major (l, t, f) order
    crc32   u32      checksum of the payload bytes

The float32-payload-plus-trailing-CRC32 convention is reused by the vector
store files and the checkpoint container.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"RADF"
VERSION = 1

KIND_LONG = 1
KIND_SHORT = 2
KIND_EMBEDDING = 3

_HEADER = struct.Struct("<4sHBIII")


def pack_payload(values: np.ndarray) -> bytes:
    """Serialize an array as little-endian float32 bytes plus trailing CRC32."""
    raw = np.ascontiguousarray(values, dtype="<f4").tobytes()
    return raw + struct.pack("<I", zlib.crc32(raw))


def unpack_payload(blob: bytes, count: int, context: str = "payload") -> np.ndarray:
    """Inverse of pack_payload; validates length and checksum."""
    need = count * 4 + 4
    if len(blob) != need:
        raise FormatError(f"{context}: expected {need} bytes, got {len(blob)}")
    raw, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(raw) != crc:
        raise FormatError(f"{context}: checksum mismatch")
    return np.frombuffer(raw, dtype="<f4").copy()


def write_feature(path, values: np.ndarray, kind: int) -> None:
    """Write a feature tensor to ``path``.

    ``values`` must be (L, T, F) for long/short kinds or (L, F) for
    embeddings (stored with T=1).
    """
    values = np.asarray(values)
    if kind == KIND_EMBEDDING:
        if values.ndim != 2:
            raise FormatError(f"embedding must be 2-D, got shape {values.shape}")
        values = values[:, None, :]
    elif values.ndim != 3:
        raise FormatError(f"feature must be 3-D, got shape {values.shape}")
    n_layers, n_frames, dim = values.shape
    header = _HEADER.pack(MAGIC, VERSION, kind, n_layers, n_frames, dim)
    Path(path).write_bytes(header + pack_payload(values))


def read_feature(path) -> tuple[int, np.ndarray]:
    """Read a RADF file; returns (kind, values).

    Values are float32, shaped (L, T, F) for long/short kinds and (L, F)
    for embeddings. Raises FormatError on bad magic, version, kind, shape,
    or checksum.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, kind, n_layers, n_frames, dim = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if kind not in (KIND_LONG, KIND_SHORT, KIND_EMBEDDING):
        raise FormatError(f"{path}: unknown kind {kind}")
    count = n_layers * n_frames * dim
    values = unpack_payload(blob[_HEADER.size:], count, context=str(path))
    values = values.reshape(n_layers, n_frames, dim)
    if kind == KIND_EMBEDDING:
        if n_frames != 1:
            raise FormatError(f"{path}: embedding with T={n_frames}")
        values = values[:, 0, :]
    return kind, values


def validate_feature(path) -> tuple[int, tuple[int, ...]]:
    """Check a RADF file without keeping the payload; returns (kind, shape)."""
    kind, values = read_feature(path)
    return kind, values.shape
