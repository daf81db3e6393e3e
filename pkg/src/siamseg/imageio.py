"""Binary PPM (P6) and PGM (P5) readers and writers.

The on-disk layout is the canonical one: magic, width, height, maxval 255,
then raw bytes. Writing then reading reproduces the array bit-exactly, which
the dataset round-trip guarantees build on.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def _read_header(data: bytes, path: str, magic: bytes):
    if not data.startswith(magic):
        raise DataError(f"{path}: bad magic, expected {magic.decode()}")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise DataError(f"{path}: non-numeric header field {data[start:pos]!r}") from None
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    if width <= 0 or height <= 0:
        raise DataError(f"{path}: bad dimensions {width}x{height}")
    return width, height, pos


def load_pgm(path) -> np.ndarray:
    """Read a binary PGM into a (H, W) uint8 array."""
    path = str(path)
    with open(path, "rb") as f:
        data = f.read()
    w, h, pos = _read_header(data, path, b"P5")
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise DataError(f"{path}: expected {w * h} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def save_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"save_pgm: expected (H, W) uint8, got {img.shape} {img.dtype}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def load_ppm(path) -> np.ndarray:
    """Read a binary PPM into a (H, W, 3) uint8 array."""
    path = str(path)
    with open(path, "rb") as f:
        data = f.read()
    w, h, pos = _read_header(data, path, b"P6")
    body = data[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise DataError(f"{path}: expected {w * h * 3} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def save_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"save_ppm: expected (H, W, 3) uint8, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def frame_to_bytes(frame: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8."""
    q = np.rint(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    return np.ascontiguousarray(q.transpose(1, 2, 0))


def bytes_to_frame(img: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float64 in [0, 1]."""
    return np.ascontiguousarray(img.transpose(2, 0, 1)).astype(np.float64) / 255.0
