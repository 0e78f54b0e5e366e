"""Per-frame tracking pipeline.

A robust branch (online-learned filter on fused features) and an accurate
branch (fixed template correlation over the layer stack) each produce a
heatmap over the search grid. They are fused with weight ``mu``, the peak is
picked after scale/ratio penalty and cosine window, the box at the peak is
decoded and then refined by score voting over neighbouring proposals.

Coordinates: the search crop is ``N = S + k - 1`` feature cells wide and is
anchored on the cell holding the previous box center. Score cell ``(i, j)``
corresponds to the pixel point ``origin + stride * (j, i)``, see
:func:`search_window`.
"""
from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.optimize import minimize

from . import labels as lab
from .correlation import FeaturePyramid, LayerWeights, aggregate_layers, fuse_features, upchannel_xcorr
from .features import extract_template
from .geometry import (DEFAULT_RATIOS, AnchorGrid, Box, DenseBoxes, anchor_shapes, clip_box,
                       cxcywh_to_xyxy, decode_offsets, encode_offsets, iou_to_one, make_anchor_grid)
from .gridmath import argmax_peak, as_heatmap, bilinear_resize, broadcast_anchor, cosine_window
from .labels import LabelConfig
from .losses import LossConfig, ResidualParams, fc_pr_loss, focal_loss
from .online_learner import (KERNEL_SIZE, OnlineFilter, OnlineLearnerConfig, SupportSet,
                             detect_distractor, init_filter, optimize, predict, schedule_update)

ROBUST_BRANCHES = {"ONR": 1, "ONC1s": 1, "ONC5s": 5, "none": 0}
ACCURATE_BRANCHES = {"OFC5s": 5, "OFC1s": 1, "OFR": 1, "none": 0}
VOTE_FLOOR = 1e-12
# (row, col) crop shifts used to augment the first frame
INIT_SHIFTS = ((0, -4), (0, 4))
INIT_ZOOM = 1.05


@dataclass(frozen=True)
class TrackerConfig:
    mu: float = 0.8
    vote_epsilon: float = 0.01
    vote_sigma: float = 0.0025
    voting: bool = True
    window_influence: float = 0.42
    penalty_k: float = 0.04
    smooth_lr: float = 0.3
    robust_branch: str = "ONR"
    accurate_branch: str = "OFC5s"
    search_cells: int = 17
    layer_weights: LayerWeights = field(default_factory=LayerWeights)
    anchor_ratios: tuple[float, ...] = DEFAULT_RATIOS
    box_noise: float = 0.1
    # share of the offset noise variance that is spatially smooth across cells
    box_noise_corr: float = 0.9
    iou_noise: float = 0.05
    learner: OnlineLearnerConfig = field(default_factory=OnlineLearnerConfig)
    labels: LabelConfig = field(default_factory=LabelConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")
        if not 0.0 < self.vote_epsilon < 1.0:
            raise ValueError("vote_epsilon must lie in (0, 1)")
        if not self.vote_sigma > 0:
            raise ValueError("vote_sigma must be positive")
        for name in ("window_influence", "smooth_lr"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.penalty_k < 0 or self.box_noise < 0 or self.iou_noise < 0:
            raise ValueError("penalty_k and noise levels must be non-negative")
        if not 0.0 <= self.box_noise_corr <= 1.0:
            raise ValueError("box_noise_corr must lie in [0, 1]")
        if self.robust_branch not in ROBUST_BRANCHES:
            raise ValueError(f"unknown robust branch {self.robust_branch!r}")
        if self.accurate_branch not in ACCURATE_BRANCHES:
            raise ValueError(f"unknown accurate branch {self.accurate_branch!r}")
        if not (self.robust_enabled or self.accurate_enabled):
            raise ValueError("at least one branch must be enabled (check mu and branch names)")
        if self.search_cells < 3:
            raise ValueError("search_cells must be >= 3")
        if len(self.anchor_ratios) < 1:
            raise ValueError("need at least one anchor ratio")

    # mu = 1 switches the accurate branch off and mu = 0 the robust one
    @property
    def robust_enabled(self) -> bool:
        return self.robust_branch != "none" and self.mu > 0.0

    @property
    def accurate_enabled(self) -> bool:
        return self.accurate_branch != "none" and self.mu < 1.0

    @property
    def robust_anchors(self) -> int:
        return ROBUST_BRANCHES[self.robust_branch] if self.robust_enabled else 0

    @property
    def accurate_anchors(self) -> int:
        return ACCURATE_BRANCHES[self.accurate_branch] if self.accurate_enabled else 0

    @property
    def num_anchors(self) -> int:
        return max(self.robust_anchors, self.accurate_anchors)

    @property
    def crop_cells(self) -> int:
        return self.search_cells + KERNEL_SIZE - 1


@dataclass(frozen=True, eq=False)
class Frame:
    """One frame's input: features, plus the scene in simulator mode."""
    features: FeaturePyramid
    scene: object = None


@dataclass(frozen=True, eq=False)
class TrackerState:
    current_box: Box
    frame_index: int
    frame_size: tuple[float, float]
    filter: OnlineFilter | None
    support: SupportSet | None
    template_kernel: np.ndarray | None  # (L, A, C, k, k)
    template_ref: np.ndarray | None  # (A,) self-response used to normalise the accurate scores
    head: np.ndarray | None  # (A, 2) logistic gain and bias of the accurate scores
    layer_weights: LayerWeights
    lost: bool
    initial_peak: float


@dataclass(eq=False)
class FrameResult:
    frame_index: int
    box: Box
    peak_value: float
    lost: bool
    robust: np.ndarray | None = None
    accurate: np.ndarray | None = None
    fused: np.ndarray | None = None
    b_star: Box | None = None
    vote_fallback: bool = False
    distractor: bool = False
    update: str | None = None


# ---------------------------------------------------------------- geometry


@dataclass(frozen=True)
class SearchWindow:
    row0: int
    col0: int
    size: int  # crop cells
    cells: int  # score cells
    stride: float

    @property
    def origin(self) -> tuple[float, float]:
        """Pixel position ``(x, y)`` of score cell ``(0, 0)``."""
        half = KERNEL_SIZE // 2
        return (self.col0 + half + 0.5) * self.stride, (self.row0 + half + 0.5) * self.stride

    def to_cells(self, x: float, y: float) -> tuple[float, float]:
        ox, oy = self.origin
        return (y - oy) / self.stride, (x - ox) / self.stride

    def to_pixels(self, row: float, col: float) -> tuple[float, float]:
        ox, oy = self.origin
        return ox + col * self.stride, oy + row * self.stride

    def shifted(self, drow: int, dcol: int) -> "SearchWindow":
        return replace(self, row0=self.row0 + drow, col0=self.col0 + dcol)


def search_window(box: Box, stride: float, cells: int) -> SearchWindow:
    size = cells + KERNEL_SIZE - 1
    ci = int(math.floor(box.cy / stride))
    cj = int(math.floor(box.cx / stride))
    return SearchWindow(ci - size // 2, cj - size // 2, size, cells, float(stride))


def shapes_for(box: Box, num_anchors: int, ratios=DEFAULT_RATIOS) -> np.ndarray:
    """Anchor presets relative to ``box``: its own shape, or area-preserving ratio variants."""
    if num_anchors == 1:
        return np.array([[box.w, box.h]])
    if num_anchors != len(ratios):
        raise ValueError(f"{num_anchors} anchors but {len(ratios)} ratios")
    return anchor_shapes(box.w, box.h, ratios)


def window_anchors(win: SearchWindow, box: Box, num_anchors: int, ratios=DEFAULT_RATIOS) -> AnchorGrid:
    return make_anchor_grid(win.cells, win.cells, win.stride, shapes_for(box, num_anchors, ratios), win.origin)


# ---------------------------------------------------------------- fusion and voting


def localize(robust_map, accurate_map, mu: float):
    """``mu * robust + (1 - mu) * accurate`` with single-anchor maps broadcast.

    Returns ``(fused, (peak_index, peak_value))``.
    """
    r = as_heatmap(robust_map)
    a = as_heatmap(accurate_map)
    if r.shape[:2] != a.shape[:2]:
        raise ValueError(f"spatial shape mismatch: {r.shape[:2]} vs {a.shape[:2]}")
    if r.shape[2] != a.shape[2]:
        n = max(r.shape[2], a.shape[2])
        r = broadcast_anchor(r, n) if r.shape[2] == 1 else r
        a = broadcast_anchor(a, n) if a.shape[2] == 1 else a
        if r.shape != a.shape:
            raise ValueError(f"anchor counts {r.shape[2]} and {a.shape[2]} cannot be broadcast")
    fused = mu * r + (1.0 - mu) * a
    return fused, argmax_peak(fused)


def regress_direct(peak, boxes: DenseBoxes) -> Box:
    return decode_offsets(boxes.grid, boxes.offsets, tuple(int(v) for v in peak))


def weighted_box_mean(boxes: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Component-wise weighted mean of ``(N, 4)`` center-form boxes."""
    weights = np.asarray(weights, dtype=float)
    return (weights[:, None] * np.asarray(boxes, dtype=float)).sum(axis=0) / weights.sum()


def vote_weights(decoded: np.ndarray, iou_map, fused, b_star: Box, cfg: TrackerConfig):
    """Neighbourhood mask and effective weights ``w * o`` for every proposal."""
    overlap = iou_to_one(decoded, b_star)
    mask = overlap > cfg.vote_epsilon
    prior = np.exp(-((1.0 - overlap) ** 2) / cfg.vote_sigma)
    w = np.maximum(as_heatmap(fused), 0.0) * prior * np.asarray(iou_map, dtype=float)
    return mask, np.where(mask, w, 0.0)


def score_vote(boxes: DenseBoxes, iou_map, fused, b_star: Box, cfg: TrackerConfig = TrackerConfig()):
    """Refine ``b_star`` by a weighted vote of the proposals overlapping it.

    Returns ``(box, fell_back)``; ``fell_back`` is set (with a warning) when the
    total weight vanishes and ``b_star`` is returned unchanged.
    """
    decoded = boxes.decode_all()
    if np.shape(iou_map) != decoded.shape[:3] or as_heatmap(fused).shape != decoded.shape[:3]:
        raise ValueError("IoU map, fused map and proposals must share (H, W, A)")
    mask, w = vote_weights(decoded, iou_map, fused, b_star, cfg)
    total = float(w.sum())
    if total <= VOTE_FLOOR:
        warnings.warn("score vote weights vanished, keeping the direct box", RuntimeWarning, stacklevel=2)
        return b_star, True
    return Box.from_array(weighted_box_mean(decoded[mask], w[mask])), False


def _size(w, h):
    pad = (w + h) / 2.0
    return np.sqrt((w + pad) * (h + pad))


def _change(x):
    return np.maximum(x, 1.0 / x)


def scale_ratio_penalty(decoded: np.ndarray, prev_box: Box, k: float) -> np.ndarray:
    """``exp(-(change(r) * change(s) - 1) * k)`` for every proposal."""
    w, h = decoded[..., 2], decoded[..., 3]
    s = _change(_size(w, h) / _size(prev_box.w, prev_box.h))
    r = _change((prev_box.w / prev_box.h) / (w / h))
    return np.exp(-(r * s - 1.0) * k)


def postprocess(fused, boxes: DenseBoxes, prev_box: Box, cfg: TrackerConfig = TrackerConfig()):
    """Penalised and windowed map plus the penalty itself (for size smoothing)."""
    fused = as_heatmap(fused)
    penalty = scale_ratio_penalty(boxes.decode_all(), prev_box, cfg.penalty_k)
    pscore = penalty * fused
    wi = cfg.window_influence
    if wi == 0.0:
        return pscore, penalty
    window = cosine_window(fused.shape[0], fused.shape[1])[:, :, None]
    return pscore * (1.0 - wi) + window * wi, penalty


def smooth_size(prev_box: Box, voted: Box, penalty: float, score: float, smooth_lr: float) -> Box:
    """Keep the voted center; move the size towards the vote at rate ``smooth_lr * p * s``."""
    eta = float(np.clip(smooth_lr * penalty * max(score, 0.0), 0.0, 1.0))
    return Box(voted.cx, voted.cy, prev_box.w * (1 - eta) + voted.w * eta,
               prev_box.h * (1 - eta) + voted.h * eta)


# ---------------------------------------------------------------- box heads


NOISE_LENGTH = 2.0  # correlation length of the smooth offset noise, in cells


@functools.lru_cache(maxsize=8)
def _smooth_gain(size: int) -> float:
    delta = np.zeros((4 * size + 1, 4 * size + 1))
    delta[2 * size, 2 * size] = 1.0
    k = gaussian_filter(delta, NOISE_LENGTH, mode="constant")
    return float(np.sqrt(np.sum(k * k)))


def offset_noise(shape, corr: float, rng) -> np.ndarray:
    """Unit-variance noise over ``(H, W, A, 4)``: a smooth field mixed with white jitter."""
    white = rng.normal(size=shape)
    if corr <= 0.0:
        return white
    field_ = gaussian_filter(rng.normal(size=shape), (NOISE_LENGTH, NOISE_LENGTH, 0, 0), mode="wrap")
    field_ /= _smooth_gain(shape[0])
    return math.sqrt(corr) * field_ + math.sqrt(1.0 - corr) * white


def oracle_box_head(scene, anchors: AnchorGrid, cfg: TrackerConfig, rng):
    """Noisy oracle offsets and IoU scores from the simulator's visible objects.

    Every cell is owned by the nearest visible object (distance normalised by
    its half-size); offsets encode the owner's box and get Gaussian noise whose
    std grows from ``box_noise`` at the owner's center to three times that at
    two half-sizes. Cells farther away keep the anchor. Most of the noise is
    spatially smooth, like the errors of a regression head whose neighbouring
    outputs see overlapping inputs.
    """
    base = anchors.boxes()
    shape = base.shape[:3]
    cx, cy = base[:, :, 0, 0], base[:, :, 0, 1]
    objs = [o.box for o in scene.objects if o.visible]
    target = base.copy()
    dist = np.full(cx.shape, np.inf)
    for b in objs:
        d = np.hypot((cx - b.cx) / (b.w / 2), (cy - b.cy) / (b.h / 2))
        closer = d < dist
        target[closer] = b.as_array()
        dist = np.where(closer, d, dist)
    owned = dist <= 2.0
    target = np.where(owned[:, :, None, None], target, base)
    offsets = encode_offsets(base, target)
    scale = cfg.box_noise * (1.0 + np.minimum(dist, 2.0))
    offsets = offsets + offset_noise(offsets.shape, cfg.box_noise_corr, rng) * scale[:, :, None, None]
    boxes = DenseBoxes(anchors, offsets)
    decoded = boxes.decode_all()
    true_iou = np.zeros(shape)
    if objs:
        flat_t = target.reshape(-1, 4)
        a = cxcywh_to_xyxy(decoded.reshape(-1, 4))
        b = cxcywh_to_xyxy(flat_t)
        iw = np.clip(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0, None)
        ih = np.clip(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0, None)
        inter = iw * ih
        union = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1]) + (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]) - inter
        true_iou = (inter / union).reshape(shape) * owned[:, :, None]
    iou_map = np.clip(true_iou + rng.normal(0.0, cfg.iou_noise, size=shape), 0.0, 1.0)
    return boxes, iou_map


def _subcell(f: np.ndarray, axis: int) -> np.ndarray:
    lo = np.roll(f, 1, axis=axis)
    hi = np.roll(f, -1, axis=axis)
    # edge cells have no neighbour on one side: no refinement there
    idx = [slice(None)] * f.ndim
    for edge in (0, -1):
        idx[axis] = edge
        lo[tuple(idx)] = f[tuple(idx)]
        hi[tuple(idx)] = f[tuple(idx)]
    curv = lo - 2.0 * f + hi
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(curv < 0, 0.5 * (lo - hi) / curv, 0.0)
    return np.clip(delta, -0.5, 0.5)


def image_box_head(fused, anchors: AnchorGrid):
    """Quadratic sub-cell center refinement with unchanged size; IoU proxy is score mass."""
    fused = as_heatmap(fused)
    base = anchors.boxes()
    offsets = np.zeros(base.shape)
    offsets[..., 0] = _subcell(fused, 1) * anchors.stride / base[..., 2]
    offsets[..., 1] = _subcell(fused, 0) * anchors.stride / base[..., 3]
    boxes = DenseBoxes(anchors, offsets)
    decoded = boxes.decode_all()
    mass = np.maximum(fused, 0.0)
    h, w, a = fused.shape
    iou_map = np.zeros(fused.shape)
    s = anchors.stride
    ox, oy = anchors.origin_offset
    for k in range(a):
        total = mass[:, :, k].sum()
        if total <= 0:
            continue
        ii = np.zeros((h + 1, w + 1))
        ii[1:, 1:] = mass[:, :, k].cumsum(0).cumsum(1)
        d = decoded[:, :, k]
        # cells whose centers fall inside the box
        c0 = np.clip(np.ceil((d[..., 0] - d[..., 2] / 2 - ox) / s), 0, w).astype(int)
        c1 = np.clip(np.floor((d[..., 0] + d[..., 2] / 2 - ox) / s) + 1, 0, w).astype(int)
        r0 = np.clip(np.ceil((d[..., 1] - d[..., 3] / 2 - oy) / s), 0, h).astype(int)
        r1 = np.clip(np.floor((d[..., 1] + d[..., 3] / 2 - oy) / s) + 1, 0, h).astype(int)
        inside = ii[r1, c1] - ii[r0, c1] - ii[r1, c0] + ii[r0, c0]
        iou_map[:, :, k] = np.where((r1 > r0) & (c1 > c0), inside, 0.0) / total
    return boxes, np.clip(iou_map, 0.0, 1.0)


# ---------------------------------------------------------------- branches


def accurate_raw(crop: np.ndarray, kernels: np.ndarray, alpha) -> np.ndarray:
    """Layer-aggregated template correlation, ``(A, S, S)``."""
    return aggregate_layers([upchannel_xcorr(crop[l], kernels[l]) for l in range(crop.shape[0])], alpha)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def accurate_scores(raw: np.ndarray, ref: np.ndarray, head: np.ndarray) -> np.ndarray:
    x = raw / ref[:, None, None]
    z = head[:, 0, None, None] * x + head[:, 1, None, None]
    return np.transpose(_sigmoid(z), (1, 2, 0))


def _fit_head(x: np.ndarray, target: np.ndarray, branch: str, losses: LossConfig) -> np.ndarray:
    """Per-anchor logistic calibration of normalised scores against first-frame labels."""
    a = x.shape[2]
    eps = 1e-6

    def objective(theta):
        g, b = theta[:a], theta[a:]
        p = np.clip(_sigmoid(g * x + b), eps, 1.0 - eps)
        if branch == "OFR":
            val, dp = fc_pr_loss(p, target, int(losses.alpha), losses.beta)
        else:
            val, dp = focal_loss(p, target, losses.gamma)
        dz = dp * p * (1.0 - p)
        return val, np.concatenate([(dz * x).sum(axis=(0, 1)), dz.sum(axis=(0, 1))])

    theta0 = np.concatenate([np.full(a, 6.0), np.full(a, -4.0)])
    bounds = [(1.0, 20.0)] * a + [(-30.0, 10.0)] * a
    res = minimize(objective, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": 200})
    return np.stack([res.x[:a], res.x[a:]], axis=1)


def robust_params(branch: str, cells: int, center, box: Box, stride: float,
                  label_cfg: LabelConfig, num_anchors: int, ratios=DEFAULT_RATIOS) -> ResidualParams:
    """Residual parameters for one support entry; ``center`` is ``(row, col)`` in score cells."""
    if branch == "ONR":
        sigma = label_cfg.sigma_for(box, stride)
        y = lab.online_pseudo_label(cells, cells, center, sigma)
        ii, jj = np.mgrid[0:cells, 0:cells]
        d = np.hypot(ii - center[0], jj - center[1])[:, :, None]
        radius = 0.5 * math.sqrt(box.w * box.h) / stride
        m = np.clip(1.0 - d / radius, 0.0, 1.0)
        return ResidualParams(1.0 + m, m, y)
    grid = make_anchor_grid(cells, cells, stride, shapes_for(box, num_anchors, ratios), 0.0)
    local = Box(center[1] * stride, center[0] * stride, box.w, box.h)
    labels = lab.assign_bernoulli_iou(grid, local, label_cfg)
    y = np.maximum(labels, 0.0)
    m = (labels == 1.0).astype(float)
    v = np.where(labels < 0, 0.0, 1.0 + y)
    return ResidualParams(v, m, y)


def _zoom(crop: np.ndarray, factor: float) -> tuple[np.ndarray, float, int]:
    n = crop.shape[-1]
    big = int(round(n * factor))
    off = (big - n) // 2
    out = bilinear_resize(crop, big, big)[:, off:off + n, off:off + n]
    return out, (big - 1) / (n - 1), off


# ---------------------------------------------------------------- state machine


def _check_frame(frame) -> Frame:
    if isinstance(frame, Frame):
        return frame
    if isinstance(frame, FeaturePyramid):
        return Frame(frame)
    raise TypeError("expected a Frame or FeaturePyramid")


def initialize(frame, gt: Box, cfg: TrackerConfig = TrackerConfig()) -> TrackerState:
    """Build the template, calibrate the accurate head and fit the online filter on frame 0."""
    frame = _check_frame(frame)
    pyr = frame.features
    fw, fh = pyr.extent
    if not (0.0 <= gt.cx <= fw and 0.0 <= gt.cy <= fh):
        raise ValueError(f"groundtruth center ({gt.cx}, {gt.cy}) outside feature extent {fw}x{fh}")
    lw = cfg.layer_weights
    if len(lw.alpha) != pyr.num_layers or len(lw.beta) != pyr.num_layers:
        raise ValueError("layer weights do not match the pyramid depth")
    s = pyr.stride
    S = cfg.search_cells
    win = search_window(gt, s, S)
    crop = pyr.crop(win.row0, win.col0, win.size, win.size)
    center = win.to_cells(gt.cx, gt.cy)
    kernels = ref = head = filt = support = None
    peak = None

    if cfg.accurate_enabled:
        a = cfg.accurate_anchors
        regions = [Box(gt.cx, gt.cy, float(w), float(h)) for w, h in shapes_for(gt, a, cfg.anchor_ratios)]
        kernels = np.stack([extract_template(pyr, r) for r in regions], axis=1)  # L, A, C, k, k
        raw = accurate_raw(crop, kernels, lw.alpha)
        ci = int(np.clip(round(center[0]), 0, S - 1))
        cj = int(np.clip(round(center[1]), 0, S - 1))
        near = raw[:, max(ci - 1, 0):ci + 2, max(cj - 1, 0):cj + 2]
        ref = near.reshape(a, -1).max(axis=1)
        ref = np.where(ref > 1e-12, ref, 1.0)
        x = np.transpose(raw / ref[:, None, None], (1, 2, 0))
        if cfg.accurate_branch == "OFR":
            target = lab.gaussian_label(S, S, center, cfg.labels.sigma_for(gt, s))
        else:
            grid = window_anchors(win, gt, a, cfg.anchor_ratios)
            target = lab.assign_atss(grid, gt, cfg.labels.topk_for(a), cfg.labels.atss_variant)
        head = _fit_head(x, target, cfg.accurate_branch, cfg.losses)

    if cfg.robust_enabled:
        a = cfg.robust_anchors
        fused_grid = fuse_features(pyr, lw.beta)
        filt = init_filter(extract_template(fused_grid, gt, stride=s), num_outputs=a)
        support = SupportSet(cfg.learner.capacity)
        base = fuse_features(crop, lw.beta)
        resp = predict(filt, base)
        ci = int(np.clip(round(center[0]), 0, S - 1))
        cj = int(np.clip(round(center[1]), 0, S - 1))
        top = float(resp[ci, cj].max())
        if top > 1e-12:
            filt = OnlineFilter(filt.weights / top)

        def params(c, box):
            return robust_params(cfg.robust_branch, S, c, box, s, cfg.labels, a, cfg.anchor_ratios)

        support.push(base, params(center, gt), 1.0, initial=True)
        support.push(np.flip(base, axis=2), params((center[0], S - 1 - center[1]), gt), 1.0, initial=True)
        for dr, dc in INIT_SHIFTS:
            sw = win.shifted(dr, dc)
            shifted = fuse_features(pyr.crop(sw.row0, sw.col0, sw.size, sw.size), lw.beta)
            support.push(shifted, params((center[0] - dr, center[1] - dc), gt), 1.0, initial=True)
        zoomed, gain, off = _zoom(base, INIT_ZOOM)
        half = KERNEL_SIZE // 2
        zc = tuple((c + half) * gain - off - half for c in center)
        support.push(zoomed, params(zc, gt.scale(gain)), 1.0, initial=True)
        filt = optimize(filt, support, cfg.learner.init_iterations, 1.0, cfg.learner.reg)
        peak = float(predict(filt, base).max())
    else:
        acc = accurate_scores(raw, ref, head)
        peak = float(acc.max())

    return TrackerState(current_box=gt, frame_index=0, frame_size=(fw, fh), filter=filt, support=support,
                        template_kernel=kernels, template_ref=ref, head=head, layer_weights=lw,
                        lost=False, initial_peak=peak)


@dataclass
class BranchMaps:
    window: SearchWindow
    base: np.ndarray | None  # beta-fused crop fed to the online filter
    robust: np.ndarray | None
    accurate: np.ndarray | None
    fused: np.ndarray


def branch_maps(state: TrackerState, pyr: FeaturePyramid, center: Box,
                cfg: TrackerConfig = TrackerConfig()) -> BranchMaps:
    """Score maps of the enabled branches over the search window around ``center``.

    With one branch disabled the fused map is the other branch's map as is.
    """
    win = search_window(center, pyr.stride, cfg.search_cells)
    crop = pyr.crop(win.row0, win.col0, win.size, win.size)
    robust = accurate = base = None
    if cfg.robust_enabled:
        base = fuse_features(crop, state.layer_weights.beta)
        robust = predict(state.filter, base)
    if cfg.accurate_enabled:
        raw = accurate_raw(crop, state.template_kernel, state.layer_weights.alpha)
        accurate = accurate_scores(raw, state.template_ref, state.head)
    if robust is None:
        fused = accurate
    elif accurate is None:
        fused = robust
    else:
        fused, _ = localize(robust, accurate, cfg.mu)
    return BranchMaps(win, base, robust, accurate, fused)


def step(state: TrackerState, frame, cfg: TrackerConfig = TrackerConfig()):
    """Track one frame. Returns ``(new_state, FrameResult)``; ``state`` is not modified."""
    frame = _check_frame(frame)
    pyr = frame.features
    prev = state.current_box
    idx = state.frame_index + 1
    s = pyr.stride
    S = cfg.search_cells
    maps = branch_maps(state, pyr, prev, cfg)
    win, base, robust, accurate, fused = maps.window, maps.base, maps.robust, maps.accurate, maps.fused

    anchors = window_anchors(win, prev, fused.shape[2], cfg.anchor_ratios)
    if frame.scene is not None:
        rng = np.random.default_rng([cfg.seed, idx, 7])
        boxes, iou_map = oracle_box_head(frame.scene, anchors, cfg, rng)
    else:
        boxes, iou_map = image_box_head(fused, anchors)

    windowed, penalty = postprocess(fused, boxes, prev, cfg)
    peak, _ = argmax_peak(windowed)
    b_star = regress_direct(peak, boxes)
    fell_back = False
    voted = b_star
    if cfg.voting:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            voted, fell_back = score_vote(boxes, iou_map, fused, b_star, cfg)
    peak_value = float(fused[peak])
    new_box = smooth_size(prev, voted, float(penalty[peak]), peak_value, cfg.smooth_lr)
    fw, fh = state.frame_size
    new_box = clip_box(new_box, fw, fh)

    check = robust if robust is not None else fused
    lost = float(check.max()) < cfg.learner.lost_ratio * state.initial_peak
    result = FrameResult(idx, prev if lost else new_box, peak_value, lost, robust, accurate, fused,
                         b_star, fell_back)
    if lost:
        return replace(state, frame_index=idx, lost=True), result

    filt, support = state.filter, state.support
    if robust is not None:
        row, col = win.to_cells(new_box.cx, new_box.cy)
        cell = (int(np.clip(round(row), 0, S - 1)), int(np.clip(round(col), 0, S - 1)))
        distractor = detect_distractor(robust, cell, cfg.learner.distractor_ratio, cfg.learner.distractor_radius)
        weight = cfg.learner.hard_sample_weight if distractor else 1.0
        support = support.copy().push(
            base, robust_params(cfg.robust_branch, S, (row, col), new_box, s, cfg.labels,
                                cfg.robust_anchors, cfg.anchor_ratios), weight)
        plan = schedule_update(idx, distractor, False, cfg.learner)
        if plan is not None:
            filt = optimize(filt, support, plan.iterations, plan.lr, cfg.learner.reg)
            result.update = plan.kind.value
        result.distractor = distractor
    state = replace(state, current_box=new_box, frame_index=idx, filter=filt, support=support, lost=False)
    return state, result


class DualModalTracker:
    """Stateful wrapper around :func:`initialize` and :func:`step`."""

    def __init__(self, cfg: TrackerConfig = TrackerConfig()):
        self.cfg = cfg
        self.state: TrackerState | None = None

    def init(self, frame, box: Box) -> None:
        self.state = initialize(frame, box, self.cfg)

    def track(self, frame) -> FrameResult:
        if self.state is None:
            raise RuntimeError("tracker used before init")
        self.state, result = step(self.state, frame, self.cfg)
        return result


__all__ = [
    "ACCURATE_BRANCHES", "DualModalTracker", "Frame", "FrameResult", "ROBUST_BRANCHES", "SearchWindow",
    "TrackerConfig", "TrackerState", "image_box_head", "initialize", "localize",
    "oracle_box_head", "postprocess", "regress_direct", "robust_params", "scale_ratio_penalty",
    "score_vote", "search_window", "smooth_size", "step", "vote_weights", "weighted_box_mean",
]
