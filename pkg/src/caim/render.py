"""Result-map rendering to PNG.

Area error maps: true positive white, true negative black, false positive
red, false negative green. Moment maps: class 0 black, change classes use
the fixed palette below (cycled when T-1 exceeds its length). PNGs are
written directly (8-bit RGB, zlib, filter 0) so no imaging library is
needed.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ShapeError

AREA_COLORS = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fp": (255, 0, 0),
    "fn": (0, 255, 0),
}

# change-moment classes 1..T-1, in order
MOMENT_PALETTE = [
    (230, 25, 75),    # red
    (60, 180, 75),    # green
    (255, 225, 25),   # yellow
    (0, 130, 200),    # blue
    (245, 130, 48),   # orange
    (145, 30, 180),   # purple
    (70, 240, 240),   # cyan
    (240, 50, 230),   # magenta
    (210, 245, 60),   # lime
    (250, 190, 212),  # pink
]


def write_png(path, rgb):
    """Write an [H, W, 3] uint8 array as an RGB PNG."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError("write_png expects [H, W, 3] uint8")
    h, w, _ = rgb.shape

    def chunk(tag, payload):
        body = tag + payload
        return struct.pack(">I", len(payload)) + body + struct.pack(">I", zlib.crc32(body))

    raw = b"".join(b"\x00" + rgb[row].tobytes() for row in range(h))
    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    blob = (b"\x89PNG\r\n\x1a\n"
            + chunk(b"IHDR", header)
            + chunk(b"IDAT", zlib.compress(raw, 6))
            + chunk(b"IEND", b""))
    Path(path).write_bytes(blob)


def read_png(path):
    """Read back an RGB PNG written by :func:`write_png` (tests only)."""
    blob = Path(path).read_bytes()
    if blob[:8] != b"\x89PNG\r\n\x1a\n":
        raise ShapeError("not a PNG file")
    off = 8
    w = h = None
    idat = b""
    while off < len(blob):
        (length,) = struct.unpack_from(">I", blob, off)
        tag = blob[off + 4:off + 8]
        payload = blob[off + 8:off + 8 + length]
        if tag == b"IHDR":
            w, h = struct.unpack_from(">II", payload, 0)
        elif tag == b"IDAT":
            idat += payload
        off += 12 + length
    raw = zlib.decompress(idat)
    stride = 1 + w * 3
    rows = [np.frombuffer(raw[r * stride + 1:(r + 1) * stride], dtype=np.uint8)
            for r in range(h)]
    return np.stack(rows).reshape(h, w, 3)


def area_error_map(pred_area, true_area):
    """[H, W, 3] colors classifying each pixel's binary outcome."""
    pred = np.asarray(pred_area).astype(bool)
    true = np.asarray(true_area).astype(bool)
    if pred.shape != true.shape:
        raise ShapeError("prediction and reference grids differ in shape")
    rgb = np.zeros(pred.shape + (3,), dtype=np.uint8)
    rgb[pred & true] = AREA_COLORS["tp"]
    rgb[~pred & ~true] = AREA_COLORS["tn"]
    rgb[pred & ~true] = AREA_COLORS["fp"]
    rgb[~pred & true] = AREA_COLORS["fn"]
    return rgb


def moment_color(cls):
    """Fixed color of a moment class (0 is black)."""
    if cls == 0:
        return (0, 0, 0)
    return MOMENT_PALETTE[(cls - 1) % len(MOMENT_PALETTE)]


def moment_map(moment, t_len=None):
    """[H, W, 3] colors for a moment-class grid."""
    moment = np.asarray(moment)
    n = int(moment.max()) + 1 if t_len is None else t_len
    lut = np.array([moment_color(c) for c in range(max(n, 1))], dtype=np.uint8)
    return lut[moment]


def export_maps(predictions, labels, out_dir, t_len=None, stem="sample"):
    """Render one area PNG and one moment PNG per sample.

    ``predictions``: list of (area_argmax, moment_argmax) grids;
    ``labels``: matching list of ChangeLabels (or (area, moment) pairs).
    Returns the list of files written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, ((pred_area, pred_moment), ref) in enumerate(zip(predictions, labels)):
        ref_area = ref.area if hasattr(ref, "area") else ref[0]
        if np.asarray(pred_area).shape != np.asarray(ref_area).shape:
            raise ShapeError(f"sample {i}: prediction/label shape mismatch")
        area_png = out_dir / f"{stem}_{i:04d}_area.png"
        moment_png = out_dir / f"{stem}_{i:04d}_moment.png"
        write_png(area_png, area_error_map(pred_area, ref_area))
        write_png(moment_png, moment_map(pred_moment, t_len))
        written += [area_png, moment_png]
    return written
