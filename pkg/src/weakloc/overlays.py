"""Overlay rendering: grayscale image, boxes and heatmap into binary PPM files.

Ground-truth boxes draw in the green channel, predicted boxes in red, and
heatmaps blend additively into red/yellow, so the three stay separable.
"""

from __future__ import annotations

import numpy as np

from .warp import BBoxParams, bbox_to_pixels, resize_bilinear


def _draw_box(rgb: np.ndarray, box: BBoxParams, channel: int) -> None:
    size = rgb.shape[0]
    r0, r1, c0, c1 = bbox_to_pixels(box, size)
    rgb[r0, c0 : c1 + 1, channel] = 255
    rgb[r1, c0 : c1 + 1, channel] = 255
    rgb[r0 : r1 + 1, c0, channel] = 255
    rgb[r0 : r1 + 1, c1, channel] = 255


def render_overlay(image: np.ndarray, truth_box: BBoxParams | None = None,
                   predicted_box: BBoxParams | None = None,
                   heatmap: np.ndarray | None = None) -> np.ndarray:
    """Compose one (H, W, 3) uint8 overlay from a (1, H, W) image in [0, 1]."""
    gray = np.clip(image[0] * 255.0, 0, 255)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    if heatmap is not None:
        size = gray.shape[0]
        heat = np.asarray(heatmap, dtype=np.float64)
        if heat.shape != gray.shape:
            heat = resize_bilinear(heat, size, size)
        lo, hi = heat.min(), heat.max()
        if hi > lo:
            heat01 = (heat - lo) / (hi - lo)
            rgb[:, :, 0] = np.clip(rgb[:, :, 0] + 140.0 * heat01, 0, 255)
            rgb[:, :, 1] = np.clip(rgb[:, :, 1] + 60.0 * heat01, 0, 255)
    if truth_box is not None:
        _draw_box(rgb, truth_box, 1)
    if predicted_box is not None:
        _draw_box(rgb, predicted_box, 0)
    return rgb.astype(np.uint8)


def write_ppm(path: str, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as a binary P6 portable pixmap."""
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.astype(np.uint8).tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read back a binary P6 file written by :func:`write_ppm`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path} is not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
