"""Boxes, anchor grids, IoU arithmetic and anchor-offset encode/decode.

Boxes are stored in center form ``(cx, cy, w, h)`` in continuous pixel
coordinates. File formats use top-left ``(x, y, w, h)``; convert with
:meth:`Box.from_xywh` / :meth:`Box.to_xywh`.

Vectorised helpers accept ``(..., 4)`` arrays in the same center layout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEFAULT_RATIOS = (1.0 / 3.0, 0.5, 1.0, 2.0, 3.0)


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box fields must be finite, got {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box width/height must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x + w / 2.0, y + h / 2.0, w, h)

    @classmethod
    def from_array(cls, arr) -> "Box":
        cx, cy, w, h = (float(v) for v in arr)
        return cls(cx, cy, w, h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    def to_xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=float)

    @property
    def area(self) -> float:
        return self.w * self.h

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.cx + dx, self.cy + dy, self.w, self.h)

    def scale(self, factor: float) -> "Box":
        return Box(self.cx * factor, self.cy * factor, self.w * factor, self.h * factor)


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float)
    half = boxes[..., 2:4] / 2.0
    return np.concatenate([boxes[..., 0:2] - half, boxes[..., 0:2] + half], axis=-1)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; touching boxes give 0."""
    ax0, ay0, ax1, ay1 = a.to_xyxy()
    bx0, by0, bx1, by1 = b.to_xyxy()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corner differences as the intersection, so iou(a, a) == 1 exactly
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    return min(inter / (area_a + area_b - inter), 1.0)


def _as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(float)
    boxes = list(boxes)
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.as_array() if isinstance(b, Box) else np.asarray(b, float) for b in boxes])


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU between two collections of boxes.

    Accepts lists of :class:`Box` or ``(N, 4)`` center-form arrays. Returns an
    ``len(a) x len(b)`` matrix whose entries equal :func:`iou` on each pair.
    """
    a = cxcywh_to_xyxy(_as_box_array(boxes_a))
    b = cxcywh_to_xyxy(_as_box_array(boxes_b))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.minimum(inter / union, 1.0)


def iou_to_one(boxes: np.ndarray, ref) -> np.ndarray:
    """IoU of every box in a ``(..., 4)`` array against a single reference box."""
    ref = ref.as_array() if isinstance(ref, Box) else np.asarray(ref, float)
    shape = boxes.shape[:-1]
    return iou_matrix(boxes.reshape(-1, 4), ref[None, :])[:, 0].reshape(shape)


@dataclass(frozen=True, eq=False)
class AnchorGrid:
    """Dense anchors over an ``height x width`` grid with ``A`` shape presets.

    Anchor ``(i, j, a)`` is centered at ``origin_offset + stride * (j, i)``
    and has shape ``shapes[a] = (w, h)``.
    """
    height: int
    width: int
    stride: float
    shapes: np.ndarray
    origin_offset: tuple[float, float] = (0.0, 0.0)

    @property
    def num_anchors(self) -> int:
        return int(self.shapes.shape[0])

    @property
    def size(self) -> int:
        return self.height * self.width * self.num_anchors

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        ox, oy = self.origin_offset
        xs = ox + self.stride * np.arange(self.width)
        ys = oy + self.stride * np.arange(self.height)
        return xs, ys

    def boxes(self) -> np.ndarray:
        """All anchors as an ``(H, W, A, 4)`` center-form array, row-major."""
        xs, ys = self.centers()
        out = np.empty((self.height, self.width, self.num_anchors, 4))
        out[..., 0] = xs[None, :, None]
        out[..., 1] = ys[:, None, None]
        out[..., 2] = self.shapes[None, None, :, 0]
        out[..., 3] = self.shapes[None, None, :, 1]
        return out

    def anchor(self, i: int, j: int, a: int) -> Box:
        ox, oy = self.origin_offset
        w, h = self.shapes[a]
        return Box(ox + self.stride * j, oy + self.stride * i, float(w), float(h))

    def same_as(self, other: "AnchorGrid") -> bool:
        return (self.height == other.height and self.width == other.width
                and self.stride == other.stride
                and tuple(self.origin_offset) == tuple(other.origin_offset)
                and np.array_equal(self.shapes, other.shapes))


def anchor_shapes(base_w: float, base_h: float | None = None,
                  ratios: Sequence[float] = DEFAULT_RATIOS) -> np.ndarray:
    """Area-preserving shape presets ``(w, h)`` with aspect ratios ``w/h`` times the base aspect."""
    base_h = base_w if base_h is None else base_h
    r = np.sqrt(np.asarray(ratios, dtype=float))
    return np.stack([base_w * r, base_h / r], axis=1)


def make_anchor_grid(height: int, width: int, stride: float, scales=5,
                     origin_offset=0.0) -> AnchorGrid:
    """Build an :class:`AnchorGrid`.

    ``scales`` is either a count ``A`` (5 gives the default ratios
    ``{1/3, 1/2, 1, 2, 3}`` on a base size of ``8 * stride``; 1 gives a single
    square anchor) or an explicit sequence of ``(w, h)`` presets.
    """
    if height < 1 or width < 1:
        raise ValueError("anchor grid needs height, width >= 1")
    if not stride > 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if isinstance(scales, (int, np.integer)):
        if scales < 1:
            raise ValueError("need at least one anchor preset")
        base = 8.0 * stride
        if scales == 1:
            shapes = anchor_shapes(base, ratios=(1.0,))
        elif scales == len(DEFAULT_RATIOS):
            shapes = anchor_shapes(base)
        else:
            shapes = anchor_shapes(base, ratios=np.geomspace(1 / 3, 3, int(scales)))
    else:
        shapes = np.asarray(list(scales), dtype=float).reshape(-1, 2)
        if shapes.shape[0] < 1:
            raise ValueError("need at least one anchor preset")
    if np.any(shapes <= 0) or not np.all(np.isfinite(shapes)):
        raise ValueError("anchor shapes must be positive and finite")
    if np.isscalar(origin_offset):
        origin_offset = (float(origin_offset), float(origin_offset))
    else:
        origin_offset = (float(origin_offset[0]), float(origin_offset[1]))
    return AnchorGrid(int(height), int(width), float(stride), shapes, origin_offset)


def encode_offsets(anchor, target) -> np.ndarray:
    """Offsets ``(dcx, dcy, dw, dh)`` that map ``anchor`` onto ``target``.

    Works on single :class:`Box` values or broadcastable ``(..., 4)`` arrays.
    """
    a = anchor.as_array() if isinstance(anchor, Box) else np.asarray(anchor, float)
    t = target.as_array() if isinstance(target, Box) else np.asarray(target, float)
    a, t = np.broadcast_arrays(a, t)
    out = np.empty(a.shape)
    out[..., 0] = (t[..., 0] - a[..., 0]) / a[..., 2]
    out[..., 1] = (t[..., 1] - a[..., 1]) / a[..., 3]
    out[..., 2] = np.log(t[..., 2] / a[..., 2])
    out[..., 3] = np.log(t[..., 3] / a[..., 3])
    return out


def apply_offsets(anchors: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Vectorised decode: center shift scaled by anchor size, exponential size scaling."""
    anchors = np.asarray(anchors, float)
    offsets = np.asarray(offsets, float)
    out = np.empty(np.broadcast_shapes(anchors.shape, offsets.shape))
    out[..., 0] = anchors[..., 0] + offsets[..., 0] * anchors[..., 2]
    out[..., 1] = anchors[..., 1] + offsets[..., 1] * anchors[..., 3]
    out[..., 2] = anchors[..., 2] * np.exp(offsets[..., 2])
    out[..., 3] = anchors[..., 3] * np.exp(offsets[..., 3])
    return out


@dataclass(frozen=True, eq=False)
class DenseBoxes:
    """Per-anchor offsets over an :class:`AnchorGrid`, shape ``(H, W, A, 4)``."""
    grid: AnchorGrid
    offsets: np.ndarray

    def __post_init__(self):
        expected = (self.grid.height, self.grid.width, self.grid.num_anchors, 4)
        if self.offsets.shape != expected:
            raise ValueError(f"offsets shape {self.offsets.shape} does not match grid {expected}")

    def decode_all(self) -> np.ndarray:
        return apply_offsets(self.grid.boxes(), self.offsets)


def decode_offsets(grid: AnchorGrid, offsets: np.ndarray, at: tuple[int, int, int]) -> Box:
    """Decode the offset stored at grid index ``(i, j, a)`` into a :class:`Box`."""
    i, j, a = at
    if not (0 <= i < grid.height and 0 <= j < grid.width and 0 <= a < grid.num_anchors):
        raise IndexError(f"index {at} outside grid {grid.height}x{grid.width}x{grid.num_anchors}")
    anchor = grid.anchor(i, j, a).as_array()
    return Box.from_array(apply_offsets(anchor, np.asarray(offsets)[i, j, a]))


def clip_box(box: Box, frame_w: float, frame_h: float, min_size: float = 4.0) -> Box:
    """Clamp center into the frame and size into ``[min_size, frame]``."""
    cx = min(max(box.cx, 0.0), frame_w)
    cy = min(max(box.cy, 0.0), frame_h)
    w = min(max(box.w, min_size), frame_w)
    h = min(max(box.h, min_size), frame_h)
    return Box(cx, cy, w, h)


def boxes_from_xywh(rows: Iterable[Sequence[float]]) -> list[Box]:
    return [Box.from_xywh(*map(float, r)) for r in rows]
