"""Minimal deterministic PNG codec for 16-bit grayscale grids.

Standard PNG (big-endian samples) with per-row adaptive filtering and a fixed
zlib strategy, so identical arrays always produce identical bytes. Only the
subset needed by the toolkit is supported: bit depth 16, grayscale.
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

_SIG = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + tag
        + payload
        + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
    )


def _filter_rows(raw: np.ndarray) -> bytes:
    """Apply the minimum-sum-of-absolutes filter heuristic per scanline."""
    h, stride = raw.shape
    bpp = 2
    prev = np.zeros(stride, dtype=np.uint8)
    out = bytearray()
    for y in range(h):
        row = raw[y]
        left = np.zeros(stride, dtype=np.int16)
        left[bpp:] = row[:-bpp]
        up = prev.astype(np.int16)
        ul = np.zeros(stride, dtype=np.int16)
        ul[bpp:] = prev[:-bpp]

        cand = {}
        cand[0] = row.astype(np.int16)
        cand[1] = row.astype(np.int16) - left
        cand[2] = row.astype(np.int16) - up
        cand[3] = row.astype(np.int16) - ((left + up) >> 1)
        p = left + up - ul
        pa = np.abs(p - left)
        pb = np.abs(p - up)
        pc = np.abs(p - ul)
        paeth = np.where((pa <= pb) & (pa <= pc), left, np.where(pb <= pc, up, ul))
        cand[4] = row.astype(np.int16) - paeth

        best_f, best_cost = 0, None
        for f, res in cand.items():
            res_u8 = (res & 0xFF).astype(np.uint8)
            cost = int(np.minimum(res_u8, 256 - res_u8.astype(np.int16)).sum())
            if best_cost is None or cost < best_cost:
                best_f, best_cost = f, cost
        out.append(best_f)
        out.extend((cand[best_f] & 0xFF).astype(np.uint8).tobytes())
        prev = row
    return bytes(out)


def encode_gray16(values: np.ndarray) -> bytes:
    """Encode a (H, W) uint16 array as 16-bit grayscale PNG bytes."""
    arr = np.asarray(values)
    if arr.dtype != np.uint16 or arr.ndim != 2:
        raise ValueError("encode_gray16 expects a 2-d uint16 array")
    h, w = arr.shape
    raw = np.ascontiguousarray(arr, dtype=">u2").view(np.uint8).reshape(h, 2 * w)
    ihdr = struct.pack(">IIBBBBB", w, h, 16, 0, 0, 0, 0)  # gray, no interlace
    compressor = zlib.compressobj(level=9, memLevel=9)
    idat = compressor.compress(_filter_rows(raw)) + compressor.flush()
    return _SIG + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", idat) + _chunk(b"IEND", b"")


def decode_gray16(data: bytes) -> np.ndarray:
    """Decode 16-bit grayscale PNG bytes back to a (H, W) uint16 array."""
    if data[:8] != _SIG:
        raise ValueError("not a png stream")
    pos = 8
    w = h = None
    idat = bytearray()
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            w, h, depth, color, comp, filt, inter = struct.unpack(">IIBBBBB", payload)
            if depth != 16 or color != 0 or inter != 0:
                raise ValueError("unsupported png: need 16-bit grayscale, no interlace")
        elif tag == b"IDAT":
            idat.extend(payload)
        elif tag == b"IEND":
            break
    if w is None:
        raise ValueError("png missing IHDR")
    raw = zlib.decompress(bytes(idat))
    stride = 2 * w
    if len(raw) != h * (stride + 1):
        raise ValueError("png payload size mismatch")
    buf = np.frombuffer(raw, dtype=np.uint8)
    out = _unfilter(buf, h, stride)
    return np.ascontiguousarray(out.reshape(h, w, 2)).view(">u2").reshape(h, w).astype(np.uint16)


from numba import njit  # noqa: E402


@njit(cache=True)
def _unfilter(buf, h, stride):
    bpp = 2
    out = np.zeros((h, stride), dtype=np.uint8)
    for y in range(h):
        f = buf[y * (stride + 1)]
        base = y * (stride + 1) + 1
        for i in range(stride):
            x = int(buf[base + i])
            left = int(out[y, i - bpp]) if i >= bpp else 0
            up = int(out[y - 1, i]) if y > 0 else 0
            ul = int(out[y - 1, i - bpp]) if (y > 0 and i >= bpp) else 0
            if f == 0:
                val = x
            elif f == 1:
                val = x + left
            elif f == 2:
                val = x + up
            elif f == 3:
                val = x + ((left + up) >> 1)
            else:  # paeth
                p = left + up - ul
                pa = abs(p - left)
                pb = abs(p - up)
                pc = abs(p - ul)
                if pa <= pb and pa <= pc:
                    pred = left
                elif pb <= pc:
                    pred = up
                else:
                    pred = ul
                val = x + pred
            out[y, i] = val & 0xFF
    return out
