"""Binary PGM (P5) / PPM (P6) reading and writing.

Images come back as float32 arrays of shape (channels, height, width) scaled
to [0, 1]; masks are stored as P5 with values {0, 255} and come back as
uint8 {0, 1}.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


_WS = b" \t\r\n\x0b\x0c"


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n and (buf[pos] in _WS or buf[pos] == ord("#")):
        if buf[pos] == ord("#"):
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
        else:
            pos += 1
    start = pos
    while pos < n and buf[pos] not in _WS and buf[pos] != ord("#"):
        pos += 1
    if start == pos:
        raise ImageFormatError(f"unexpected end of header at byte {pos}")
    return buf[start:pos], pos


def _header_int(buf: bytes, pos: int, what: str) -> tuple[int, int]:
    tok, end = _read_token(buf, pos)
    if not tok.isdigit():
        raise ImageFormatError(f"bad {what} {tok!r} at byte {end - len(tok)}")
    return int(tok), end


def decode_netpbm(buf: bytes) -> tuple[np.ndarray, int]:
    """Parse a P5/P6 byte string into a uint8 (C, H, W) array and its maxval."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r} at byte 0 (expected P5 or P6)")
    channels = 1 if magic == b"P5" else 3
    width, pos = _header_int(buf, 2, "width")
    height, pos = _header_int(buf, pos, "height")
    maxval, pos = _header_int(buf, pos, "maxval")
    if width < 1 or height < 1:
        raise ImageFormatError(f"non-positive extent {width}x{height} in header ending at byte {pos}")
    if not 0 < maxval < 256:
        raise ImageFormatError(f"maxval {maxval} at byte {pos} is not an 8-bit value")
    if pos >= len(buf) or buf[pos] not in _WS:
        raise ImageFormatError(f"missing whitespace after maxval at byte {pos}")
    pos += 1
    need = width * height * channels
    have = len(buf) - pos
    if have < need:
        raise ImageFormatError(
            f"truncated payload: header promises {need} bytes from byte {pos}, file ends at byte {len(buf)}"
        )
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    if data.max(initial=0) > maxval:
        raise ImageFormatError(f"sample exceeds maxval {maxval} in payload starting at byte {pos}")
    arr = data.reshape(height, width, channels).transpose(2, 0, 1)
    return arr, maxval


def encode_netpbm(arr: np.ndarray) -> bytes:
    """(1|3, H, W) uint8 -> P5/P6 bytes with maxval 255."""
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3) or arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 array of shape (1|3, H, W), got {arr.dtype} {arr.shape}")
    c, h, w = arr.shape
    magic = b"P5" if c == 1 else b"P6"
    header = magic + f"\n{w} {h}\n255\n".encode()
    return header + np.ascontiguousarray(arr.transpose(1, 2, 0)).tobytes()


def load_image(path: str | Path) -> np.ndarray:
    """Read a P5/P6 file as float32 (C, H, W) in [0, 1]."""
    try:
        raw, maxval = decode_netpbm(Path(path).read_bytes())
    except ImageFormatError as e:
        raise ImageFormatError(f"{path}: {e}") from None
    return raw.astype(np.float32) / np.float32(maxval)


def save_image(image: np.ndarray, path: str | Path) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    q = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    Path(path).write_bytes(encode_netpbm(q))


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    m = np.asarray(mask)
    if m.ndim != 2 or not np.isin(m, (0, 1)).all():
        raise ValueError(f"mask must be a 2-D binary array, got shape {m.shape}")
    Path(path).write_bytes(encode_netpbm((m.astype(np.uint8) * 255)[None]))


def load_mask(path: str | Path) -> np.ndarray:
    try:
        raw, _ = decode_netpbm(Path(path).read_bytes())
    except ImageFormatError as e:
        raise ImageFormatError(f"{path}: {e}") from None
    if raw.shape[0] != 1:
        raise ImageFormatError(f"{path}: masks must be single-channel P5")
    return (raw[0] > 0).astype(np.uint8)
