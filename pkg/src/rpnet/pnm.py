"""Binary PGM (P5) and PPM (P6) rasters, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class PNMError(ValueError):
    """Malformed netpbm data; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


_CHANNELS = {b"P5": 1, b"P6": 3}
_WS = b" \t\r\n"


def _token(buf: bytes, pos: int) -> tuple[bytes, int, int]:
    while pos < len(buf):
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c in _WS:
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and buf[pos:pos + 1] not in _WS and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PNMError("unexpected end of header", start)
    return buf[start:pos], start, pos


def decode(buf: bytes) -> np.ndarray:
    """Parse P5/P6 bytes into (H, W) or (H, W, 3) uint8."""
    magic = buf[:2]
    if magic not in _CHANNELS:
        raise PNMError(f"bad magic {magic!r}, expected b'P5' or b'P6'", 0)
    pos = 2
    vals = []
    for what in ("width", "height", "maxval"):
        tok, start, pos = _token(buf, pos)
        if not tok.isdigit() or int(tok) <= 0:
            raise PNMError(f"invalid {what} {tok!r}", start)
        vals.append(int(tok))
    width, height, maxval = vals
    if maxval != 255:
        raise PNMError(f"unsupported maxval {maxval}, only 255", pos)
    if pos >= len(buf) or buf[pos:pos + 1] not in _WS:
        raise PNMError("missing whitespace after header", pos)
    pos += 1
    ch = _CHANNELS[magic]
    expected = width * height * ch
    actual = len(buf) - pos
    if actual < expected:
        raise PNMError(f"truncated payload: expected {expected} bytes, got {actual}", pos)
    arr = np.frombuffer(buf, dtype=np.uint8, count=expected, offset=pos)
    shape = (height, width) if ch == 1 else (height, width, 3)
    return arr.reshape(shape).copy()


def encode(img: np.ndarray) -> bytes:
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        raise TypeError(f"expected uint8 raster, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode raster of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def read_pnm(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def read_pgm(path) -> np.ndarray:
    img = read_pnm(path)
    if img.ndim != 2:
        raise PNMError(f"{path} is not a P5 graymap", 0)
    return img


def read_ppm(path) -> np.ndarray:
    img = read_pnm(path)
    if img.ndim != 3:
        raise PNMError(f"{path} is not a P6 pixmap", 0)
    return img


def write_pgm(path, img: np.ndarray):
    if np.asarray(img).ndim != 2:
        raise ValueError("PGM needs a 2-D raster")
    Path(path).write_bytes(encode(img))


def write_ppm(path, img: np.ndarray):
    if np.asarray(img).ndim != 3:
        raise ValueError("PPM needs an (H, W, 3) raster")
    Path(path).write_bytes(encode(img))


def to_gray8(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to [0, 255]; out-of-range values clamp."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.rint(v * 255.0).astype(np.uint8)


def write_map_pgm(path, values: np.ndarray):
    """Write a [0, 1] activation or probability map as 8-bit PGM."""
    v = np.asarray(values)
    if v.ndim == 3:
        v = v[..., 0]
    write_pgm(path, to_gray8(v))
