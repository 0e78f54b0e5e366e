"""Feature providers that stand in for a learned backbone.

``oracle`` mode paints each simulated object as a Gaussian blob carrying its
identity vector plus a shared objectness signature. Shallow layers are sharp
and mostly objectness, deep layers are blurrier and mostly identity, which
gives a cheap analogue of the usual precision/semantics trade-off across
backbone depth. ``image`` mode computes gradient-orientation histograms from
a grayscale frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .correlation import FeaturePyramid
from .geometry import Box
from .gridmath import adaptive_avg_pool, bilinear_resize

ORIENTATION_BINS = 8
TEMPLATE_SIZE = 5


@dataclass(frozen=True)
class FeatureProviderConfig:
    mode: str = "oracle"
    channels: int = 16
    stride: int = 8
    layer_count: int = 3
    noise_sigma: float = 0.05
    identity_dim: int = 8
    seed: int = 0
    # per-layer mixing; index 0 is the shallowest layer
    identity_gain: tuple[float, ...] = (0.3, 0.8, 1.0)
    objectness_gain: tuple[float, ...] = (1.0, 0.5, 0.15)
    blur: tuple[float, ...] = (0.8, 1.1, 1.5)
    smoothing: tuple[float, ...] = (0.0, 1.0, 2.0)

    def __post_init__(self):
        if self.mode not in ("oracle", "image"):
            raise ValueError(f"unknown feature mode {self.mode!r}")
        if not self.channels >= self.identity_dim >= 1:
            raise ValueError("need channels >= identity_dim >= 1")
        if self.stride < 1 or self.layer_count < 1:
            raise ValueError("stride and layer_count must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        for name in ("identity_gain", "objectness_gain", "blur", "smoothing"):
            if len(getattr(self, name)) < self.layer_count:
                raise ValueError(f"{name} needs one entry per layer")


def _layer_nodes(n_fine: int, level: int, stride: float):
    # coarse sample positions spanning the fine cell centers, so that an
    # align-corners resize back to n_fine cells lands on the right pixels
    n = max(2, int(math.ceil(n_fine / 2 ** level)))
    return np.linspace(0.5 * stride, (n_fine - 0.5) * stride, n)


def synth_features(scene, cfg: FeatureProviderConfig = FeatureProviderConfig()) -> FeaturePyramid:
    """Oracle pyramid for a simulated scene; deterministic in ``(cfg.seed, frame_index)``."""
    fw, fh = scene.frame_size
    s = cfg.stride
    gw, gh = fw // s, fh // s
    if gw < 1 or gh < 1:
        raise ValueError("frame smaller than one feature cell")
    rng = np.random.default_rng([cfg.seed, scene.frame_index])
    extra = cfg.channels - cfg.identity_dim
    objectness = np.ones(extra) / math.sqrt(extra) if extra else np.zeros(0)
    layers = []
    for lvl in range(cfg.layer_count):
        xs = _layer_nodes(gw, lvl, s)
        ys = _layer_nodes(gh, lvl, s)
        grid = np.zeros((cfg.channels, ys.size, xs.size))
        for obj in scene.objects:
            if not obj.visible:
                continue
            ident = np.asarray(obj.identity, dtype=float)
            if ident.size != cfg.identity_dim:
                raise ValueError(f"identity has {ident.size} dims, provider expects {cfg.identity_dim}")
            sx = obj.box.w / 4.0 * cfg.blur[lvl]
            sy = obj.box.h / 4.0 * cfg.blur[lvl]
            bx = np.exp(-0.5 * ((xs - obj.box.cx) / sx) ** 2)
            by = np.exp(-0.5 * ((ys - obj.box.cy) / sy) ** 2)
            vec = np.concatenate([cfg.identity_gain[lvl] * ident, cfg.objectness_gain[lvl] * objectness])
            grid += vec[:, None, None] * np.outer(by, bx)[None]
        if cfg.noise_sigma:
            grid += rng.normal(0.0, cfg.noise_sigma, size=grid.shape)
        layers.append(bilinear_resize(grid, gh, gw))
    return FeaturePyramid(np.stack(layers), float(s))


def orientation_histogram(frame, stride: int, smoothing: float = 0.0) -> np.ndarray:
    """``(8, H//s, W//s)`` magnitude-weighted orientation histograms.

    Bin ``b`` is centered on ``b * 45`` degrees with angles measured from the
    column axis towards the row axis.
    """
    img = np.asarray(frame, dtype=float)
    if smoothing > 0:
        img = gaussian_filter(img, smoothing, mode="reflect")
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    bins = np.floor((ang + np.pi / ORIENTATION_BINS) / (2 * np.pi / ORIENTATION_BINS)).astype(int) % ORIENTATION_BINS
    gh, gw = img.shape[0] // stride, img.shape[1] // stride
    mag = mag[:gh * stride, :gw * stride]
    bins = bins[:gh * stride, :gw * stride]
    out = np.empty((ORIENTATION_BINS, gh, gw))
    for b in range(ORIENTATION_BINS):
        m = np.where(bins == b, mag, 0.0)
        out[b] = m.reshape(gh, stride, gw, stride).mean(axis=(1, 3))
    return out


def image_features(frame, cfg: FeatureProviderConfig = FeatureProviderConfig(mode="image")) -> FeaturePyramid:
    """Gradient-orientation pyramid, one layer per pre-smoothing scale.

    The pyramid always has 8 channels whatever ``cfg.channels`` says.
    """
    img = np.asarray(frame, dtype=float)
    if img.ndim != 2:
        raise ValueError("image features need a grayscale 2-D frame")
    s = cfg.stride
    if img.shape[0] < s or img.shape[1] < s:
        raise ValueError(f"frame {img.shape} smaller than one {s}x{s} cell")
    layers = [orientation_histogram(img / 255.0, s, cfg.smoothing[lvl]) for lvl in range(cfg.layer_count)]
    gh, gw = layers[0].shape[1:]
    return FeaturePyramid(np.stack([bilinear_resize(x, gh, gw) for x in layers]), float(s))


def box_cells(box: Box, stride: float, grid_h: int, grid_w: int) -> tuple[int, int, int, int]:
    """Cell range ``(r0, r1, c0, c1)`` (half-open) covered by ``box``, clipped to the grid."""
    x0, y0, x1, y1 = box.to_xyxy()
    c0 = max(int(math.floor(x0 / stride + 1e-9)), 0)
    r0 = max(int(math.floor(y0 / stride + 1e-9)), 0)
    c1 = min(int(math.ceil(x1 / stride - 1e-9)), grid_w)
    r1 = min(int(math.ceil(y1 / stride - 1e-9)), grid_h)
    if r1 <= r0 or c1 <= c0:
        raise ValueError(f"box {box} does not intersect the feature grid")
    return r0, r1, c0, c1


def extract_template(pyr, box: Box, size: int = TEMPLATE_SIZE, stride: float | None = None) -> np.ndarray:
    """Pool the box region to ``size x size`` cells.

    A :class:`FeaturePyramid` gives ``(L, C, size, size)``; a bare ``(C, H, W)``
    grid (with ``stride``) gives ``(C, size, size)``.
    """
    if isinstance(pyr, FeaturePyramid):
        r0, r1, c0, c1 = box_cells(box, pyr.stride, pyr.height, pyr.width)
        return np.stack([adaptive_avg_pool(layer[:, r0:r1, c0:c1], size, size) for layer in pyr.layers])
    grid = np.asarray(pyr, dtype=float)
    r0, r1, c0, c1 = box_cells(box, 8.0 if stride is None else stride, grid.shape[1], grid.shape[2])
    return adaptive_avg_pool(grid[:, r0:r1, c0:c1], size, size)


def provide(scene=None, frame=None, cfg: FeatureProviderConfig = FeatureProviderConfig()) -> FeaturePyramid:
    if cfg.mode == "oracle":
        if scene is None:
            raise ValueError("oracle features need a scene")
        return synth_features(scene, cfg)
    if frame is None:
        raise ValueError("image features need a frame")
    return image_features(frame, cfg)
