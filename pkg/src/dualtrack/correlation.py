"""Correlation scoring and layer aggregation.

Feature grids are ``(C, H, W)`` arrays; correlation is valid-mode (no
padding) and does not flip the kernel.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """``L`` feature layers on a common ``(C, H, W)`` grid with a shared stride."""
    layers: np.ndarray  # (L, C, H, W)
    stride: float = 8.0

    def __post_init__(self):
        layers = np.asarray(self.layers, dtype=float)
        if layers.ndim != 4 or min(layers.shape) < 1:
            raise ValueError(f"pyramid must be LxCxHxW, got {layers.shape}")
        if not np.all(np.isfinite(layers)):
            raise ValueError("pyramid features must be finite")
        object.__setattr__(self, "layers", layers)

    @property
    def num_layers(self) -> int:
        return self.layers.shape[0]

    @property
    def channels(self) -> int:
        return self.layers.shape[1]

    @property
    def height(self) -> int:
        return self.layers.shape[2]

    @property
    def width(self) -> int:
        return self.layers.shape[3]

    @property
    def extent(self) -> tuple[float, float]:
        """Covered frame size ``(width, height)`` in pixels."""
        return self.width * self.stride, self.height * self.stride

    def crop(self, row0: int, col0: int, size_h: int, size_w: int) -> np.ndarray:
        """``(L, C, size_h, size_w)`` window starting at cell ``(row0, col0)``, zero-padded."""
        out = np.zeros((self.num_layers, self.channels, size_h, size_w))
        r0, c0 = max(row0, 0), max(col0, 0)
        r1, c1 = min(row0 + size_h, self.height), min(col0 + size_w, self.width)
        if r1 > r0 and c1 > c0:
            out[:, :, r0 - row0:r1 - row0, c0 - col0:c1 - col0] = self.layers[:, :, r0:r1, c0:c1]
        return out


@dataclass(frozen=True)
class LayerWeights:
    """Per-layer weights: ``alpha`` aggregates scores, ``beta`` fuses features.

    Defaults lean the offline scores on shallow (sharp) layers and the online
    filter features on deep (identity-heavy) layers.
    """
    alpha: tuple[float, ...] = (0.6, 0.3, 0.1)
    beta: tuple[float, ...] = (0.1, 0.2, 0.7)

    def __post_init__(self):
        a = tuple(float(x) for x in self.alpha)
        b = tuple(float(x) for x in self.beta)
        if not a or not b or not all(np.isfinite(a + b)):
            raise ValueError("layer weights must be finite and non-empty")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    def on_simplex(self, tol: float = 1e-9) -> bool:
        return all(min(f) >= -tol and abs(sum(f) - 1.0) <= tol for f in (self.alpha, self.beta))


def _check(feature: np.ndarray, kernel: np.ndarray):
    kh, kw = kernel.shape[-2:]
    if kh > feature.shape[-2] or kw > feature.shape[-1]:
        raise ValueError(f"kernel exceeds feature: kernel {kh}x{kw}, feature {feature.shape[-2:]}")
    if kernel.shape[-3] != feature.shape[0]:
        raise ValueError(f"channel mismatch: kernel {kernel.shape[-3]}, feature {feature.shape[0]}")


def depthwise_xcorr(feature, kernel) -> np.ndarray:
    """Per-channel valid cross-correlation: ``(C,H,W) x (C,k,k) -> (C,H-k+1,W-k+1)``."""
    feature = np.asarray(feature, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    _check(feature, kernel)
    win = sliding_window_view(feature, kernel.shape[-2:], axis=(1, 2))
    return np.einsum("cijab,cab->cij", win, kernel)


def im2col(feature, kh: int, kw: int) -> np.ndarray:
    """Rows are output cells (row-major), columns are ``(c, a, b)`` kernel taps."""
    feature = np.asarray(feature, dtype=float)
    win = sliding_window_view(feature, (kh, kw), axis=(1, 2))  # C, H', W', kh, kw
    c, ho, wo = win.shape[:3]
    return win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * kh * kw)


def upchannel_xcorr(feature, kernel) -> np.ndarray:
    """Channel-summed correlation.

    A ``(C,k,k)`` kernel gives a ``(1,H',W')`` map; an ``(A,C,k,k)`` stack of
    kernels gives ``(A,H',W')``.
    """
    feature = np.asarray(feature, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    single = kernel.ndim == 3
    if single:
        kernel = kernel[None]
    _check(feature, kernel[0])
    kh, kw = kernel.shape[-2:]
    ho, wo = feature.shape[1] - kh + 1, feature.shape[2] - kw + 1
    cols = im2col(feature, kh, kw)
    out = cols @ kernel.reshape(kernel.shape[0], -1).T
    return out.T.reshape(kernel.shape[0], ho, wo)


def aggregate_layers(per_layer_scores: Sequence[np.ndarray], alpha: Sequence[float]) -> np.ndarray:
    """Weighted sum of per-layer score maps."""
    scores = [np.asarray(s, dtype=float) for s in per_layer_scores]
    if len(scores) != len(alpha):
        raise ValueError(f"{len(scores)} score maps but {len(alpha)} weights")
    shape = scores[0].shape
    if any(s.shape != shape for s in scores):
        raise ValueError("shape mismatch between layer scores")
    out = np.zeros(shape)
    for w, s in zip(alpha, scores):
        out += w * s
    return out


def fuse_features(pyr, beta: Sequence[float]) -> np.ndarray:
    """Collapse a pyramid (or an ``(L, C, H, W)`` array) into one grid with layer weights."""
    layers = pyr.layers if isinstance(pyr, FeaturePyramid) else np.asarray(pyr, dtype=float)
    if layers.shape[0] != len(beta):
        raise ValueError(f"{layers.shape[0]} layers but {len(beta)} weights")
    return np.tensordot(np.asarray(beta, dtype=float), layers, axes=(0, 0))
