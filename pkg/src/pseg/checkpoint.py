"""Versioned binary parameter files.

Layout, all integers 64-bit little-endian::

    b"PSEG1"
    repeated: name_len, name (UTF-8), rank, extents..., float64 payload (row-major)
    fnv1a64 of every preceding byte
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import _kernels as K
from .errors import ChecksumError, LengthError, ParseError

MAGIC = b"PSEG1"
_U64 = struct.Struct("<Q")


def fnv1a64(data: bytes) -> int:
    return K.fnv1a64(np.frombuffer(data, dtype=np.uint8))


def encode_checkpoint(params) -> bytes:
    """``params``: iterable of (name, array) in the order they should be stored."""
    parts = [MAGIC]
    for name, arr in params:
        arr = np.asarray(arr, dtype="<f8")  # tobytes() is row-major; keeps rank 0
        raw = name.encode("utf-8")
        parts.append(_U64.pack(len(raw)))
        parts.append(raw)
        parts.append(_U64.pack(arr.ndim))
        parts.extend(_U64.pack(n) for n in arr.shape)
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + _U64.pack(fnv1a64(body))


def decode_checkpoint(data: bytes, source="<checkpoint>", expected=None):
    """Parse checkpoint bytes into an ordered ``{name: array}``.

    ``expected`` maps each allowed name to its shape; names outside it, names
    missing from it and shape mismatches are all rejected.
    """
    if len(data) < len(MAGIC) + 8:
        raise LengthError(source, "file too short for a checkpoint")
    if data[:len(MAGIC)] != MAGIC:
        raise ParseError(source, "bad magic; not a PSEG1 checkpoint")
    body, tail = data[:-8], data[-8:]
    if _U64.unpack(tail)[0] != fnv1a64(body):
        raise ChecksumError(source, "checksum mismatch")

    out = {}
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise LengthError(source, f"truncated record at byte {pos}")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    while pos < len(body):
        (name_len,) = _U64.unpack(take(8))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(source, f"parameter name at byte {pos} is not UTF-8") from None
        (rank,) = _U64.unpack(take(8))
        if rank > 8:
            raise ParseError(source, f"{name}: implausible rank {rank}")
        shape = tuple(_U64.unpack(take(8))[0] for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        if name in out:
            raise ParseError(source, f"duplicate parameter {name!r}")
        out[name] = arr

    if expected is not None:
        unknown = sorted(set(out) - set(expected))
        missing = sorted(set(expected) - set(out))
        if unknown:
            raise ParseError(source, f"unknown parameter(s): {', '.join(unknown)}")
        if missing:
            raise ParseError(source, f"missing parameter(s): {', '.join(missing)}")
        for name, shape in expected.items():
            if tuple(out[name].shape) != tuple(shape):
                raise ParseError(source, f"{name}: shape {out[name].shape} != expected {tuple(shape)}")
    return out


def save_checkpoint(path, params):
    path = Path(path)
    path.write_bytes(encode_checkpoint(params))
    return path


def load_checkpoint(path, expected=None):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ParseError(path, f"cannot read checkpoint ({exc})") from None
    return decode_checkpoint(data, path, expected)
