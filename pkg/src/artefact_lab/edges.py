"""Canny edge detection shared by coin-circle finding and contour tracing."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

_EIGHT = np.ones((3, 3), dtype=bool)


def gradients(u: np.ndarray, sigma: float):
    """Smoothed Sobel gradients, scaled to intensity per pixel."""
    s = ndimage.gaussian_filter(u, sigma, mode="nearest") if sigma > 0 else u
    gx = ndimage.sobel(s, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(s, axis=0, mode="nearest") / 8.0
    return gx, gy


def non_max_suppression(mag, gx, gy):
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (((angle + 22.5) // 45.0) % 4).astype(int)
    # neighbour offsets (dy, dx) along the gradient for each sector
    offsets = [(0, 1), (1, 1), (1, 0), (1, -1)]
    padded = np.pad(mag, 1)
    h, w = mag.shape
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dy, dx) in enumerate(offsets):
        a = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        b = padded[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        # ties resolved toward the forward neighbour so plateaus stay one pixel thick
        keep |= (sector == s) & (mag > a) & (mag >= b)
    return keep


def canny(u: np.ndarray, sigma: float = 2.0, t_low: float = 0.02, t_high: float = 0.05):
    """Return (edge mask, gx, gy) for a float image.

    Thresholds are gradient magnitudes in intensity units per pixel.
    """
    if not t_low < t_high:
        raise ValueError("t_low must be below t_high")
    gx, gy = gradients(np.asarray(u, dtype=np.float64), sigma)
    mag = np.hypot(gx, gy)
    thin = non_max_suppression(mag, gx, gy)
    weak = thin & (mag >= t_low)
    strong = thin & (mag >= t_high)
    labels, n = ndimage.label(weak, structure=_EIGHT)
    if n == 0:
        return np.zeros_like(weak), gx, gy
    has_strong = np.zeros(n + 1, dtype=bool)
    has_strong[labels[strong]] = True
    has_strong[0] = False
    return has_strong[labels], gx, gy
