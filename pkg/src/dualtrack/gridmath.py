"""Dense-grid utilities: normalisation, peak finding, resizing and windowing.

A heatmap is a plain ``(H, W, A)`` float array (``A = 1`` allowed). Feature
grids are ``(C, H, W)``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


def as_heatmap(values) -> np.ndarray:
    """Promote a 2-D map to ``(H, W, 1)``; validate a 3-D one."""
    h = np.asarray(values, dtype=float)
    if h.ndim == 2:
        h = h[:, :, None]
    if h.ndim != 3 or min(h.shape) < 1:
        raise ValueError(f"heatmap must be HxW or HxWxA with positive dims, got {h.shape}")
    return h


def softmax_norm(h) -> np.ndarray:
    """Softmax over every cell of the map (max-subtracted)."""
    h = np.asarray(h, dtype=float)
    e = np.exp(h - h.max())
    return e / e.sum()


def sum_norm(h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("sum_norm expects non-negative values")
    total = h.sum()
    if total <= 0:
        raise ValueError("degenerate distribution: all-zero map")
    return h / total


def argmax_peak(h) -> tuple[tuple[int, int, int], float]:
    """Index ``(i, j, a)`` and value of the maximal cell.

    Ties go to the smallest row-major linear index (anchor fastest, then
    column, then row), which is exactly what ``np.argmax`` on the C-ordered
    array returns.
    """
    h = as_heatmap(h)
    flat = int(np.argmax(h))
    i, j, a = np.unravel_index(flat, h.shape)
    return (int(i), int(j), int(a)), float(h.reshape(-1)[flat])


def _resize_axis(x: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = x.shape[axis]
    if n == out:
        return x
    if n == 1:
        return np.repeat(x, out, axis=axis)
    if out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(out) * ((n - 1) / (out - 1))
    lo = np.clip(np.floor(pos).astype(int), 0, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    shape = [1] * x.ndim
    shape[axis] = out
    frac = frac.reshape(shape)
    return np.take(x, lo, axis=axis) * (1.0 - frac) + np.take(x, hi, axis=axis) * frac


def bilinear_resize(grid, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resampling of a ``(C, H, W)`` grid."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 3:
        raise ValueError(f"expected CxHxW grid, got shape {grid.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    if grid.shape[1:] == (out_h, out_w):
        return grid.copy()
    return _resize_axis(_resize_axis(grid, out_h, 1), out_w, 2)


def hann(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("window length must be >= 1")
    if n == 1:
        return np.ones(1)
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / (n - 1))


def cosine_window(h: int, w: int) -> np.ndarray:
    """Outer product of Hann vectors; peak 1 at the center for odd sizes."""
    return np.outer(hann(h), hann(w))


def broadcast_anchor(h, target_a: int) -> np.ndarray:
    h = as_heatmap(h)
    if h.shape[2] != 1:
        raise ValueError(f"can only broadcast single-anchor maps, got A={h.shape[2]}")
    return np.repeat(h, target_a, axis=2)


def adaptive_avg_pool(grid, out_h: int, out_w: int) -> np.ndarray:
    """Adaptive average pooling of a ``(C, H, W)`` grid.

    Bin ``i`` spans rows ``[floor(i*H/out), ceil((i+1)*H/out))``, so bins may
    overlap when upsampling and tile exactly when ``H`` divides evenly.
    """
    grid = np.asarray(grid, dtype=float)
    c, hh, ww = grid.shape
    out = np.empty((c, out_h, out_w))
    rows = [(i * hh // out_h, -(-(i + 1) * hh // out_h)) for i in range(out_h)]
    cols = [(j * ww // out_w, -(-(j + 1) * ww // out_w)) for j in range(out_w)]
    for i, (r0, r1) in enumerate(rows):
        band = grid[:, r0:r1, :]
        for j, (c0, c1) in enumerate(cols):
            out[:, i, j] = band[:, :, c0:c1].mean(axis=(1, 2))
    return out


def write_heatmap(path, h) -> None:
    """Text dump: ``H W A`` header then values row-major, anchor fastest."""
    h = as_heatmap(h)
    hh, ww, aa = h.shape
    lines = [f"{hh} {ww} {aa}"]
    for i in range(hh):
        lines.append(" ".join(f"{v:.9g}" for v in h[i].reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_heatmap(path) -> np.ndarray:
    tokens = Path(path).read_text(encoding="ascii").split()
    if len(tokens) < 3:
        raise ValueError(f"{path}: missing heatmap header")
    hh, ww, aa = (int(t) for t in tokens[:3])
    values = np.array([float(t) for t in tokens[3:]])
    if values.size != hh * ww * aa:
        raise ValueError(f"{path}: expected {hh * ww * aa} values, found {values.size}")
    return values.reshape(hh, ww, aa)
