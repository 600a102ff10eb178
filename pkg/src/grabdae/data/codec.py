"""Binary PPM (P6) and PGM (P5) codecs, maxval 255 only.

Layout: magic (``P6``/``P5``), whitespace, width, whitespace, height,
whitespace, maxval, exactly one whitespace byte, then ``width*height*c``
bytes row-major. ``#`` comments may appear between header tokens.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

_WS = b" \t\r\n\x0b\x0c"


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c in _WS and c:
            pos += 1
        elif c == b"#":
            end = buf.find(b"\n", pos)
            pos = n if end < 0 else end + 1
        else:
            break
    start = pos
    while pos < n and buf[pos:pos + 1] not in _WS and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated header", start)
    return buf[start:pos], start, pos


def _decode(buf: bytes, magic: bytes, channels: int) -> np.ndarray:
    if buf[:2] != magic:
        raise FormatError(f"bad magic {buf[:2]!r}, expected {magic!r}", 0)
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        tok, at, pos = _read_token(buf, pos)
        try:
            val = int(tok)
        except ValueError:
            raise FormatError(f"non-numeric {what} {tok!r}", at) from None
        if val <= 0:
            raise FormatError(f"{what} must be positive", at)
        fields.append(val)
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", pos)
    if pos >= len(buf) or buf[pos:pos + 1] not in _WS:
        raise FormatError("missing whitespace before payload", pos)
    pos += 1
    need = width * height * channels
    if len(buf) - pos < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf) - pos}", len(buf))
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return raw.reshape(shape)


def decode_ppm_bytes(buf: bytes) -> np.ndarray:
    """Raw 8-bit (H, W, 3) array."""
    return _decode(buf, b"P6", 3).copy()


def decode_ppm(buf: bytes) -> np.ndarray:
    """Float32 (H, W, 3) image with channels in [0, 1]."""
    return (decode_ppm_bytes(buf).astype(np.float32) / np.float32(255.0))


def to_uint8(img) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(img) -> bytes:
    """Encode a float [0, 1] or uint8 (H, W, 3) image as binary P6."""
    arr = to_uint8(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"PPM needs (H, W, 3), got {arr.shape}")
    h, w = arr.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes()


def decode_pgm(buf: bytes) -> np.ndarray:
    """Raw 8-bit (H, W) array."""
    return _decode(buf, b"P5", 1).copy()


def encode_pgm(gray) -> bytes:
    arr = np.asarray(gray)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    arr = to_uint8(arr) if arr.dtype != np.uint8 else arr
    if arr.ndim != 2:
        raise ValueError(f"PGM needs (H, W), got {arr.shape}")
    h, w = arr.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path, img) -> None:
    Path(path).write_bytes(encode_ppm(img))


def read_mask(path) -> np.ndarray:
    """Boolean mask from a P5 file (non-zero = foreground)."""
    return decode_pgm(Path(path).read_bytes()) > 0


def write_mask(path, mask) -> None:
    Path(path).write_bytes(encode_pgm(np.asarray(mask, dtype=bool)))
