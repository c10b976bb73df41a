"""On-disk spectrogram cache: one ``.halu`` file per clip.

Layout (little-endian)::

    b"HALU"  u32 version  u32 T  u32 F     16-byte header
    T*F float32, time-major
    8-byte config fingerprint
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .audio import LogMelSpectrogram

MAGIC = b"HALU"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class CacheError(ValueError):
    pass


def encode_spectrogram(spec: LogMelSpectrogram) -> bytes:
    values = np.ascontiguousarray(spec.values, dtype="<f4")
    T, F = values.shape
    if len(spec.fingerprint) != 8:
        raise CacheError(f"fingerprint must be 8 bytes, got {len(spec.fingerprint)}")
    return _HEADER.pack(MAGIC, VERSION, T, F) + values.tobytes() + spec.fingerprint


def decode_spectrogram(data: bytes) -> LogMelSpectrogram:
    if len(data) < _HEADER.size:
        raise CacheError("truncated cache header")
    magic, version, T, F = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CacheError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CacheError(f"unsupported cache version {version}")
    n = T * F * 4
    if len(data) != _HEADER.size + n + 8:
        raise CacheError(f"cache size {len(data)} does not match {T}x{F} payload")
    values = np.frombuffer(data, dtype="<f4", count=T * F, offset=_HEADER.size).reshape(T, F)
    return LogMelSpectrogram(values.astype(np.float32), data[_HEADER.size + n :])


def write_spectrogram(path, spec: LogMelSpectrogram) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_spectrogram(spec))
    os.replace(tmp, path)


def read_spectrogram(path) -> LogMelSpectrogram:
    with open(path, "rb") as fh:
        return decode_spectrogram(fh.read())


def read_fingerprint(path) -> bytes | None:
    """Fingerprint of an existing cache file, or None if absent or unreadable."""
    try:
        size = os.path.getsize(path)
        with open(path, "rb") as fh:
            head = fh.read(_HEADER.size)
            magic, version, T, F = _HEADER.unpack(head)
            if magic != MAGIC or version != VERSION or size != _HEADER.size + T * F * 4 + 8:
                return None
            fh.seek(-8, os.SEEK_END)
            return fh.read(8)
    except (OSError, struct.error):
        return None
