"""Brute-force reference implementations used to check the fast paths.

Plain nested loops over numpy arrays in ``(H, W)`` single-plane layout.
Slow on purpose and written without reference to the torch versions.
"""

from __future__ import annotations

import math

import numpy as np


def sobel_loop(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for di in range(3):
                for dj in range(3):
                    # replicate padding: clamp the source index
                    r = min(max(i + di - 1, 0), h - 1)
                    c = min(max(j + dj - 1, 0), w - 1)
                    acc += kernel[di][dj] * plane[r, c]
            out[i, j] = acc
    return out


def total_variation_loop(plane: np.ndarray) -> float:
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    tv = 0.0
    for i in range(h):
        for j in range(w):
            if i + 1 < h:
                tv += abs(plane[i + 1, j] - plane[i, j])
            if j + 1 < w:
                tv += abs(plane[i, j + 1] - plane[i, j])
    return tv


def mse_loop(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    total = 0.0
    for x, y in zip(a, b):
        total += (x - y) ** 2
    return total / len(a)


def psnr_loop(a: np.ndarray, b: np.ndarray) -> float:
    mse = mse_loop(a, b)
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def ssim_loop(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Windowed SSIM on a single plane, one window position at a time."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    half = (window - 1) / 2.0
    weights = [[math.exp(-((u - half) ** 2 + (v - half) ** 2) / (2 * sigma**2))
                for v in range(window)] for u in range(window)]
    norm = sum(sum(row) for row in weights)
    c1, c2 = 0.01**2, 0.03**2
    h, w = a.shape
    values = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            mx = my = sxx = syy = sxy = 0.0
            for u in range(window):
                for v in range(window):
                    g = weights[u][v] / norm
                    x = a[i + u, j + v]
                    y = b[i + u, j + v]
                    mx += g * x
                    my += g * y
                    sxx += g * x * x
                    syy += g * y * y
                    sxy += g * x * y
            vx = sxx - mx * mx
            vy = syy - my * my
            cov = sxy - mx * my
            values.append(((2 * mx * my + c1) * (2 * cov + c2))
                          / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(values) / len(values)


def foreground_edge_loop(image: np.ndarray, mask: np.ndarray, kernels) -> float:
    """Foreground edge loss for one ``(C, H, W)`` image and ``(H, W)`` mask."""
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    total = 0.0
    for ch in range(c):
        masked = image[ch] * mask
        for k in kernels:
            total += np.abs(sobel_loop(masked, k)).sum()
    return -total / (h * w)
