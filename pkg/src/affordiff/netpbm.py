"""Binary PPM (P6, 8-bit RGB) and PGM (P5, 8/16-bit) read/write."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _read_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"PPM needs an HxWx3 uint8 array, got {image.shape} {image.dtype}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), start = _read_tokens(buf, 4)
    if magic != b"P6" or int(maxval) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(w), int(h)
    raster = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=start)
    return raster.reshape(h, w, 3).copy()


def write_pgm16(path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("PGM needs a 2-d array")
    if values.min(initial=0) < 0 or values.max(initial=0) > 65535:
        raise ValueError("PGM16 values must lie in [0, 65535]")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        # netpbm stores 16-bit samples most significant byte first
        fh.write(values.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), start = _read_tokens(buf, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    raster = np.frombuffer(buf, dtype=dtype, count=w * h, offset=start)
    return raster.reshape(h, w).astype(np.uint16 if maxval > 255 else np.uint8)
