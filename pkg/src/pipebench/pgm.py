"""Binary PGM (P5) reading and writing for 8-bit grayscale images."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PgmError(ValueError):
    pass


def encode_pgm(image: np.ndarray) -> bytes:
    """Serialize a 2-D uint8 array as a P5 byte string, rows top to bottom."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise PgmError(f"expected a 2-D image, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise PgmError(f"expected uint8 pixels, got {image.dtype}")
    h, w = image.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(image).tobytes()


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    # Header tokens are whitespace separated; '#' starts a comment to end of line.
    out: list[bytes] = []
    pos = 0
    while len(out) < count:
        if pos >= len(data):
            raise PgmError("truncated PGM header")
        c = data[pos : pos + 1]
        if c == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            out.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return out, pos + 1


def decode_pgm(data: bytes) -> np.ndarray:
    (magic, w, h, maxval), offset = _tokens(data, 4)
    if magic != b"P5":
        raise PgmError(f"unsupported magic {magic!r}, only P5 is handled")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise PgmError(f"only maxval 255 is supported, got {maxval}")
    raster = data[offset : offset + w * h]
    if len(raster) != w * h:
        raise PgmError(f"expected {w * h} pixel bytes, found {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(image))


def read_pgm(path: str | Path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())
