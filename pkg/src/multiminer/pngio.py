"""Minimal PNG writer (8-bit grayscale or RGB) and a tiny line-chart rasterizer."""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def encode_png(image) -> bytes:
    """Encode ``[H,W]`` (gray) or ``[H,W,3]`` (RGB) values in [0, 1] or uint8."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr.astype(np.float64), 0.0, 1.0) * 255).astype(np.uint8)
    if arr.ndim == 2:
        color_type = 0
    elif arr.ndim == 3 and arr.shape[2] == 3:
        color_type = 2
    else:
        raise ValueError(f"PNG needs [H,W] or [H,W,3], got shape {arr.shape}")
    h, w = arr.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("PNG image must be non-empty")
    rows = arr.reshape(h, -1)
    # filter type 0 (None) on every scanline
    raw = np.concatenate([np.zeros((h, 1), np.uint8), rows], axis=1).tobytes()
    header = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    return (PNG_SIGNATURE + _chunk(b"IHDR", header) + _chunk(b"IDAT", zlib.compress(raw, 9))
            + _chunk(b"IEND", b""))


def write_png(path, image) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_png(image))
    return path


def decode_png(data: bytes) -> np.ndarray:
    """Inverse of :func:`encode_png` for its own output (filter 0, 8-bit, gray/RGB)."""
    if data[:8] != PNG_SIGNATURE:
        raise ValueError("not a PNG stream")
    pos, idat, header = 8, b"", None
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + length]
        if zlib.crc32(tag + payload) & 0xFFFFFFFF != struct.unpack(">I", data[pos + 8 + length:pos + 12 + length])[0]:
            raise ValueError(f"CRC mismatch in {tag!r} chunk")
        if tag == b"IHDR":
            header = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat += payload
        pos += 12 + length
    if header is None:
        raise ValueError("PNG has no IHDR chunk")
    w, h, depth, color_type = header[:4]
    channels = {0: 1, 2: 3}.get(color_type)
    if depth != 8 or channels is None:
        raise ValueError("only 8-bit gray/RGB PNGs are supported")
    raw = np.frombuffer(zlib.decompress(idat), np.uint8).reshape(h, 1 + w * channels)
    if np.any(raw[:, 0] != 0):
        raise ValueError("only filter type 0 is supported")
    px = raw[:, 1:]
    return px.reshape(h, w) if channels == 1 else px.reshape(h, w, 3)


# ---------------------------------------------------------------------------
# drawing helpers
# ---------------------------------------------------------------------------

def upscale(img: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour enlargement along the two leading axes."""
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def to_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return np.repeat(img[..., None], 3, axis=2) if img.ndim == 2 else img


def draw_line(canvas: np.ndarray, p0, p1, color) -> None:
    """Rasterize a segment by dense sampling (canvas is ``[H,W,3]`` float)."""
    (y0, x0), (y1, x1) = p0, p1
    n = int(max(abs(y1 - y0), abs(x1 - x0))) * 2 + 2
    ys = np.round(np.linspace(y0, y1, n)).astype(int)
    xs = np.round(np.linspace(x0, x1, n)).astype(int)
    ok = (ys >= 0) & (ys < canvas.shape[0]) & (xs >= 0) & (xs < canvas.shape[1])
    canvas[ys[ok], xs[ok]] = color


def draw_cross(canvas: np.ndarray, cy: int, cx: int, half: int, color) -> None:
    draw_line(canvas, (cy - half, cx - half), (cy + half, cx + half), color)
    draw_line(canvas, (cy - half, cx + half), (cy + half, cx - half), color)


SERIES_COLORS = [(0.85, 0.2, 0.2), (0.2, 0.45, 0.85), (0.2, 0.65, 0.3), (0.6, 0.3, 0.7)]


def line_chart(series: dict, height: int = 160, width: int = 240, y_range=(0.0, 1.0),
               margin: int = 12) -> np.ndarray:
    """Axes plus one polyline per series (name -> list of (x, y)); returns ``[H,W,3]``."""
    canvas = np.ones((height, width, 3))
    axis = (0.3, 0.3, 0.3)
    draw_line(canvas, (height - margin, margin), (height - margin, width - margin), axis)
    draw_line(canvas, (margin, margin), (height - margin, margin), axis)
    xs = [x for pts in series.values() for x, _ in pts]
    if not xs:
        return canvas
    x_lo, x_hi = min(xs), max(xs)
    x_span = (x_hi - x_lo) or 1.0
    y_lo, y_hi = y_range
    y_span = (y_hi - y_lo) or 1.0

    def to_px(x, y):
        px = margin + (x - x_lo) / x_span * (width - 2 * margin)
        py = height - margin - (np.clip(y, y_lo, y_hi) - y_lo) / y_span * (height - 2 * margin)
        return py, px

    for k, pts in enumerate(series.values()):
        color = SERIES_COLORS[k % len(SERIES_COLORS)]
        pix = [to_px(x, y) for x, y in pts]
        for a, b in zip(pix, pix[1:]):
            draw_line(canvas, a, b, color)
        for py, px in pix:
            draw_cross(canvas, int(round(py)), int(round(px)), 2, color)
    return canvas
