"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import LengthError, ParseError

_WHITESPACE = b" \t\n\r\v\f"


def _header(buf, path):
    """Parse magic, width, height, maxval; return them plus the payload offset."""
    fields = []
    pos = 0
    n = len(buf)
    while len(fields) < 4:
        while pos < n and buf[pos] in _WHITESPACE:
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos] not in _WHITESPACE and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise LengthError(path, "file ends inside the header")
        fields.append(buf[start:pos])
    if pos >= n or buf[pos] not in _WHITESPACE:
        raise LengthError(path, "header not terminated by whitespace")
    magic = fields[0].decode("ascii", "replace")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ParseError(path, f"non-numeric header fields {fields[1:]}") from None
    if width <= 0 or height <= 0:
        raise ParseError(path, f"bad dimensions {width}x{height}")
    if not 0 < maxval < 256:
        raise ParseError(path, f"only 8-bit files are supported (maxval {maxval})")
    return magic, width, height, maxval, pos + 1


def read_pnm(path):
    """Return (array, maxval); array is (H, W, 3) for P6 and (H, W) for P5."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ParseError(path, f"cannot read ({exc.strerror})") from None
    if len(buf) < 2 or buf[:2] not in (b"P6", b"P5"):
        raise ParseError(path, f"bad magic number {buf[:2]!r}, expected P6 or P5")
    magic, width, height, maxval, offset = _header(buf, path)
    if magic not in ("P5", "P6"):
        raise ParseError(path, f"bad magic number {magic!r}")
    channels = 3 if magic == "P6" else 1
    need = width * height * channels
    payload = buf[offset:offset + need]
    if len(payload) < need:
        raise LengthError(path, f"pixel data truncated: {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8)
    if arr.max(initial=0) > maxval:
        raise ParseError(path, f"sample value above maxval {maxval}")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape).copy(), maxval


def read_ppm(path):
    arr, maxval = read_pnm(path)
    if arr.ndim != 3:
        raise ParseError(path, "expected a P6 pixmap")
    return _rescale(arr, maxval)


def read_pgm(path):
    arr, maxval = read_pnm(path)
    if arr.ndim != 2:
        raise ParseError(path, "expected a P5 graymap")
    return arr, maxval


def _rescale(arr, maxval):
    if maxval == 255:
        return arr
    return np.round(arr.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)


def encode_ppm(image):
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"P6 needs (H, W, 3) uint8, got {image.shape}")
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image).tobytes()


def encode_pgm(gray):
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError(f"P5 needs (H, W) uint8, got {gray.shape}")
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray).tobytes()


def write_ppm(path, image):
    Path(path).write_bytes(encode_ppm(image))


def write_pgm(path, gray):
    Path(path).write_bytes(encode_pgm(gray))
