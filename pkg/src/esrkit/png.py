"""Minimal 8-bit PNG reader/writer built on :mod:`zlib`.

Reads non-interlaced 8-bit grayscale, gray+alpha, RGB and RGBA files and
returns RGB (alpha is dropped).  Writes 8-bit RGB.  Every decode failure is a
:class:`PngDecodeError` carrying the byte offset where the problem was found.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

SIGNATURE = b"\x89PNG\r\n\x1a\n"
_CHANNELS = {0: 1, 2: 3, 4: 2, 6: 4}


class PngDecodeError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


def _chunks(data: bytes):
    pos = len(SIGNATURE)
    while True:
        if pos + 8 > len(data):
            raise PngDecodeError("truncated chunk header", pos)
        length, ctype = struct.unpack(">I4s", data[pos : pos + 8])
        end = pos + 12 + length
        if end > len(data):
            raise PngDecodeError(f"truncated {ctype!r} chunk", pos)
        body = data[pos + 8 : pos + 8 + length]
        (crc,) = struct.unpack(">I", data[pos + 8 + length : end])
        if zlib.crc32(ctype + body) != crc:
            raise PngDecodeError(f"CRC mismatch in {ctype!r} chunk", pos)
        yield pos, ctype, body
        if ctype == b"IEND":
            return
        pos = end


def _paeth_row(line: np.ndarray, prev: np.ndarray, bpp: int) -> None:
    out = line.tolist()
    up = prev.tolist()
    for i in range(len(out)):
        a = out[i - bpp] if i >= bpp else 0
        b = up[i]
        c = up[i - bpp] if i >= bpp else 0
        p = a + b - c
        pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
        if pa <= pb and pa <= pc:
            pred = a
        elif pb <= pc:
            pred = b
        else:
            pred = c
        out[i] = (out[i] + pred) & 0xFF
    line[:] = out


def _average_row(line: np.ndarray, prev: np.ndarray, bpp: int) -> None:
    out = line.tolist()
    up = prev.tolist()
    for i in range(len(out)):
        a = out[i - bpp] if i >= bpp else 0
        out[i] = (out[i] + ((a + up[i]) >> 1)) & 0xFF
    line[:] = out


def _unfilter(raw: bytes, height: int, stride: int, bpp: int, base: int) -> np.ndarray:
    need = height * (stride + 1)
    if len(raw) < need:
        raise PngDecodeError(f"image data too short: {len(raw)} < {need} bytes", base)
    buf = np.frombuffer(raw[:need], np.uint8).reshape(height, stride + 1)
    out = np.zeros((height, stride), np.uint8)
    prev = np.zeros(stride, np.uint8)
    for y in range(height):
        ftype = int(buf[y, 0])
        line = buf[y, 1:].copy()
        if ftype == 0:
            pass
        elif ftype == 1:
            ln = line.astype(np.int64).reshape(-1, bpp)
            line = (np.cumsum(ln, axis=0) & 0xFF).astype(np.uint8).reshape(-1)
        elif ftype == 2:
            line = (line.astype(np.uint16) + prev).astype(np.uint8)
        elif ftype == 3:
            _average_row(line, prev, bpp)
        elif ftype == 4:
            _paeth_row(line, prev, bpp)
        else:
            raise PngDecodeError(f"unknown filter type {ftype} on row {y}", base)
        out[y] = line
        prev = line
    return out


def decode(data: bytes) -> np.ndarray:
    """Decode PNG bytes into an ``(h, w, 3)`` uint8 array."""
    if not data.startswith(SIGNATURE):
        raise PngDecodeError("missing PNG signature", 0)
    header = None
    idat: list[bytes] = []
    idat_pos = None
    saw_end = False
    for pos, ctype, body in _chunks(data):
        if header is None:
            if ctype != b"IHDR" or len(body) != 13:
                raise PngDecodeError("first chunk must be a 13-byte IHDR", pos)
            header = struct.unpack(">IIBBBBB", body)
            width, height, depth, ctype_c, comp, filt, interlace = header
            if width == 0 or height == 0:
                raise PngDecodeError("zero image dimension", pos)
            if depth != 8 or ctype_c not in _CHANNELS:
                raise PngDecodeError(f"unsupported bit depth {depth} / color type {ctype_c}", pos)
            if comp != 0 or filt != 0 or interlace != 0:
                raise PngDecodeError("unsupported compression, filter method or interlace", pos)
        elif ctype == b"IDAT":
            if idat_pos is None:
                idat_pos = pos
            idat.append(body)
        elif ctype == b"IEND":
            saw_end = True
    if header is None:
        raise PngDecodeError("no IHDR chunk", len(SIGNATURE))
    if not saw_end:
        raise PngDecodeError("missing IEND chunk", len(data))
    if idat_pos is None:
        raise PngDecodeError("no IDAT chunk", len(data))
    width, height, _, color, *_ = header
    chans = _CHANNELS[color]
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise PngDecodeError(f"corrupt zlib stream: {exc}", idat_pos) from None
    px = _unfilter(raw, height, width * chans, chans, idat_pos).reshape(height, width, chans)
    if chans == 1 or chans == 2:
        px = np.repeat(px[:, :, :1], 3, axis=2)
    return np.ascontiguousarray(px[:, :, :3])


def encode(pixels: np.ndarray, level: int = 6) -> bytes:
    """Encode an ``(h, w, 3)`` uint8 array as an RGB PNG (filter type 0)."""
    px = np.ascontiguousarray(pixels, dtype=np.uint8)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) pixels, got {px.shape}")
    h, w, _ = px.shape
    rows = np.concatenate([np.zeros((h, 1), np.uint8), px.reshape(h, w * 3)], axis=1)

    def chunk(ctype: bytes, body: bytes) -> bytes:
        return struct.pack(">I", len(body)) + ctype + body + struct.pack(">I", zlib.crc32(ctype + body))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return SIGNATURE + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(rows.tobytes(), level)) + chunk(b"IEND", b"")
