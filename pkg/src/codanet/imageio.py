"""Binary PGM/PPM (P5/P6) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out, pos = [], 0
    while len(out) < count:
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
            raise ImageFormatError("truncated PNM header")
        out.append(buf[start:pos])
    return out, pos + 1  # single whitespace byte after maxval


def decode_pnm(buf: bytes) -> np.ndarray:
    """``(pixels, maxval)``; pixels are ``(H, W)`` for P5 or ``(H, W, 3)`` for P6."""
    toks, pos = _tokens(buf, 4)
    magic = toks[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported PNM magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError:
        raise ImageFormatError("non-numeric PNM header") from None
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"bad maxval {maxval}")
    ch = 3 if magic == b"P6" else 1
    dt = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    need = w * h * ch * dt.itemsize
    if len(buf) - pos < need:
        raise ImageFormatError(f"PNM payload truncated: {len(buf) - pos} of {need} bytes")
    arr = np.frombuffer(buf, dtype=dt, count=w * h * ch, offset=pos)
    arr = arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)
    return arr.astype(np.uint16 if dt.itemsize == 2 else np.uint8), maxval


def read_image(path) -> np.ndarray:
    """Image as ``(C, H, W)`` float32 in [0, 1] (C = 1 for PGM, 3 for PPM)."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from None
    arr, maxval = decode_pnm(buf)
    img = arr.astype(np.float32) / maxval
    return img[None] if img.ndim == 2 else np.ascontiguousarray(img.transpose(2, 0, 1))


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8, got {rgb.shape}")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def encode_pgm(gray: np.ndarray) -> bytes:
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes()


def write_image(path, image: np.ndarray) -> None:
    """Write a ``(C, H, W)`` float image in [0, 1] as PGM (C=1) or PPM (C=3)."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    u8 = np.rint(img * 255).astype(np.uint8)
    if u8.shape[0] == 1:
        data = encode_pgm(u8[0])
    elif u8.shape[0] == 3:
        data = encode_ppm(u8.transpose(1, 2, 0))
    else:
        raise ValueError(f"cannot write {u8.shape[0]}-channel image")
    Path(path).write_bytes(data)
