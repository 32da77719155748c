"""Binary tensor containers.

``COTA-MEL`` (one matrix)::

    b"COTA-MEL" | u32 version | u32 rows | u32 cols | rows*cols f32   (little-endian)

``COTA-FEA`` (per-utterance L/R pairs keyed by manifest row)::

    b"COTA-FEA" | u32 version | u32 n_entries
    repeated: u32 key_len | key utf-8 | L block | R block
    block:    u32 rows | u32 cols | rows*cols f32
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MEL_MAGIC = b"COTA-MEL"
FEA_MAGIC = b"COTA-FEA"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")


class ArchiveFormatError(ValueError):
    pass


def _write_block(f, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=_F32)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
    f.write(_U32.pack(arr.shape[0]))
    f.write(_U32.pack(arr.shape[1]))
    f.write(arr.tobytes(order="C"))


def _read_u32(f) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise ArchiveFormatError("truncated archive")
    return _U32.unpack(raw)[0]


def _read_block(f) -> np.ndarray:
    rows, cols = _read_u32(f), _read_u32(f)
    n = rows * cols * 4
    raw = f.read(n)
    if len(raw) != n:
        raise ArchiveFormatError("truncated tensor payload")
    return np.frombuffer(raw, dtype=_F32).reshape(rows, cols).astype(np.float32)


def _read_header(f, magic: bytes) -> int:
    got = f.read(len(magic))
    if got != magic:
        raise ArchiveFormatError(f"bad magic {got!r}, expected {magic!r}")
    version = _read_u32(f)
    if version != FORMAT_VERSION:
        raise ArchiveFormatError(f"unsupported archive version {version}")
    return version


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def mel_to_bytes(frames: np.ndarray) -> bytes:
    buf = io.BytesIO()
    buf.write(MEL_MAGIC)
    buf.write(_U32.pack(FORMAT_VERSION))
    _write_block(buf, frames)
    return buf.getvalue()


def mel_from_bytes(payload: bytes) -> np.ndarray:
    f = io.BytesIO(payload)
    _read_header(f, MEL_MAGIC)
    return _read_block(f)


def save_mel(path, frames: np.ndarray) -> None:
    _atomic_write(path, mel_to_bytes(frames))


def load_mel(path) -> np.ndarray:
    return mel_from_bytes(Path(path).read_bytes())


def save_features(path, entries: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> None:
    buf = io.BytesIO()
    buf.write(FEA_MAGIC)
    buf.write(_U32.pack(FORMAT_VERSION))
    buf.write(_U32.pack(len(entries)))
    for key, (ling, resid) in entries.items():
        k = str(key).encode("utf-8")
        buf.write(_U32.pack(len(k)))
        buf.write(k)
        _write_block(buf, ling)
        _write_block(buf, np.asarray(resid).reshape(len(resid), -1))
    _atomic_write(path, buf.getvalue())


def load_features(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    out = {}
    with open(path, "rb") as f:
        _read_header(f, FEA_MAGIC)
        for _ in range(_read_u32(f)):
            key = f.read(_read_u32(f)).decode("utf-8")
            out[key] = (_read_block(f), _read_block(f))
    return out
