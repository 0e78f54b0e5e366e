"""Protocols and metrics.

Reset protocol (VOT style): a frame with zero overlap is a failure; the
tracker is re-initialised from groundtruth ``reinit_delay`` frames later and
the first ``burn_in`` frames of every (re)initialisation are left out of the
accuracy average. One-pass evaluation runs without resets.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import Box, iou
from .gridmath import argmax_peak, as_heatmap, softmax_norm, sum_norm

REINIT_DELAY = 5
BURN_IN = 10
PRECISION_PX = 20.0
P_FLOOR = 1e-12


@dataclass
class RunRecord:
    sequence: str
    boxes: list  # Box or None for frames the tracker did not process
    overlaps: list[float]
    failures: list[int] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.boxes) != len(self.overlaps):
            raise ValueError("boxes and overlaps differ in length")
        if any(not 0.0 <= o <= 1.0 for o in self.overlaps):
            raise ValueError("overlaps must lie in [0, 1]")
        if any(b <= a for a, b in zip(self.failures, self.failures[1:])):
            raise ValueError("failure indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.overlaps)

    @property
    def reinit_delay(self) -> int:
        return int(self.config.get("protocol.reinit_delay", REINIT_DELAY))

    @property
    def burn_in(self) -> int:
        return int(self.config.get("protocol.burn_in", BURN_IN))


def _box_of(output):
    return output if isinstance(output, Box) else output.box


def run_reset_protocol(factory: Callable, frames: Sequence, groundtruth: Sequence[Box],
                       reinit_delay: int = REINIT_DELAY, burn_in: int = BURN_IN,
                       sequence: str = "seq", config: dict | None = None) -> RunRecord:
    """Drive ``factory()`` trackers (``init(frame, box)`` / ``track(frame)``) over a sequence."""
    n = len(groundtruth)
    if len(frames) != n:
        raise ValueError("frames and groundtruth differ in length")
    if n <= burn_in:
        raise ValueError(f"sequence length {n} must exceed burn_in {burn_in}")
    boxes: list = [None] * n
    overlaps = [0.0] * n
    failures = []
    t = 0
    while t < n:
        tracker = factory()
        tracker.init(frames[t], groundtruth[t])
        boxes[t] = groundtruth[t]
        overlaps[t] = 1.0
        t += 1
        while t < n:
            box = _box_of(tracker.track(frames[t]))
            o = iou(box, groundtruth[t])
            boxes[t], overlaps[t] = box, o
            if o <= 0.0:
                failures.append(t)
                t += reinit_delay
                break
            t += 1
    cfg = dict(config or {})
    cfg.update({"protocol": "reset", "protocol.reinit_delay": reinit_delay, "protocol.burn_in": burn_in})
    return RunRecord(sequence, boxes, overlaps, failures, cfg)


def run_ope(factory: Callable, frames: Sequence, groundtruth: Sequence[Box],
            sequence: str = "seq", config: dict | None = None) -> RunRecord:
    """One pass from the first frame, no resets."""
    n = len(groundtruth)
    if len(frames) != n:
        raise ValueError("frames and groundtruth differ in length")
    tracker = factory()
    tracker.init(frames[0], groundtruth[0])
    boxes = [groundtruth[0]]
    for t in range(1, n):
        boxes.append(_box_of(tracker.track(frames[t])))
    overlaps = [iou(b, g) for b, g in zip(boxes, groundtruth)]
    cfg = dict(config or {})
    cfg["protocol"] = "ope"
    return RunRecord(sequence, boxes, overlaps, [], cfg)


def init_frames(record: RunRecord) -> list[int]:
    """Frames where the tracker was (re)initialised."""
    starts = [0] + [f + record.reinit_delay for f in record.failures]
    return [s for s in starts if s < len(record)]


def scored_mask(record: RunRecord) -> np.ndarray:
    """Frames that count towards accuracy: tracked, not a failure, past burn-in."""
    mask = np.array([b is not None for b in record.boxes])
    for s in init_frames(record):
        mask[s:s + record.burn_in] = False
    mask[list(record.failures)] = False
    return mask


def accuracy_robustness(records: Sequence[RunRecord]) -> tuple[float, float]:
    """``A``: mean over sequences of the mean scored overlap; ``R``: mean failure rate."""
    if not records:
        raise ValueError("need at least one record")
    accs = []
    for r in records:
        m = scored_mask(r)
        if m.any():
            accs.append(float(np.asarray(r.overlaps)[m].mean()))
    a = float(np.mean(accs)) if accs else 0.0
    rob = float(np.mean([len(r.failures) / len(r) for r in records]))
    return a, rob


def default_interval(records: Sequence[RunRecord]) -> tuple[int, int]:
    lengths = [len(r) for r in records]
    return int(0.5 * float(np.median(lengths))), max(lengths) - 1


def segments(record: RunRecord) -> list[tuple[np.ndarray, bool]]:
    """Split a reset-protocol record into ``(overlaps, failed)`` runs, one per (re)initialisation.

    A segment starts at an init frame and ends at its failure frame
    (inclusive) or at the end of the sequence.
    """
    ov = np.asarray(record.overlaps, dtype=float)
    out = []
    fails = list(record.failures)
    for s in init_frames(record):
        f = next((x for x in fails if x > s), None)
        if f is None:
            out.append((ov[s:], False))
        else:
            out.append((ov[s:f + 1], True))
    return out


def expected_overlap_curve(records: Sequence[RunRecord]) -> np.ndarray:
    """``Phi(i)``: mean overlap ``i`` frames after a (re)initialisation.

    Segments that end in a failure count as overlap 0 from the failure on;
    segments cut off by the end of their sequence only count while observed.
    """
    if not records:
        raise ValueError("need at least one record")
    longest = max(len(r) for r in records)
    total = np.zeros(longest)
    count = np.zeros(longest)
    for r in records:
        for ov, failed in segments(r):
            total[:ov.size] += ov
            count[:ov.size] += 1
            if failed:
                count[ov.size:] += 1
    with np.errstate(invalid="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def eao_lite(records: Sequence[RunRecord], interval: tuple[int, int] | None = None) -> float:
    """Mean of the expected-overlap curve over ``interval`` (inclusive frame indices)."""
    phi = expected_overlap_curve(records)
    lo, hi = default_interval(records) if interval is None else interval
    if not 0 <= lo <= hi < phi.size:
        raise ValueError(f"interval {(lo, hi)} outside observed lengths [0, {phi.size - 1}]")
    window = phi[lo:hi + 1]
    window = window[~np.isnan(window)]
    return float(window.mean()) if window.size else 0.0


THRESHOLDS = np.arange(101) / 100.0
NORM_THRESHOLDS = np.arange(51) / 100.0


def ope_curves(records: Sequence[RunRecord], groundtruths: Sequence[Sequence[Box]]):
    """``(auc, precision@20px, norm_precision)`` pooled over all frames.

    Success counts IoU strictly above each threshold in ``{0, 0.01, ..., 1}``;
    normalised precision averages, over thresholds ``0..0.5``, the fraction of
    frames whose size-normalised center error is within the threshold.
    """
    ious, err, nerr = [], [], []
    for rec, gts in zip(records, groundtruths):
        if len(rec) != len(gts):
            raise ValueError(f"record {rec.sequence} and its groundtruth differ in length")
        for b, g in zip(rec.boxes, gts):
            if b is None:
                ious.append(0.0)
                err.append(math.inf)
                nerr.append(math.inf)
                continue
            ious.append(iou(b, g))
            err.append(math.hypot(b.cx - g.cx, b.cy - g.cy))
            nerr.append(math.hypot((b.cx - g.cx) / g.w, (b.cy - g.cy) / g.h))
    if not ious:
        raise ValueError("no frames to evaluate")
    ious = np.asarray(ious)
    success = (ious[None, :] > THRESHOLDS[:, None]).mean(axis=1)
    precision = float((np.asarray(err) < PRECISION_PX).mean())
    norm = float((np.asarray(nerr)[None, :] <= NORM_THRESHOLDS[:, None]).mean())
    return float(success.mean()), precision, norm


def kld(gt_map, pred_map, norm: str = "softmax") -> float:
    """``D(q || p)`` with ``q`` the sum-normalised groundtruth map."""
    q = sum_norm(as_heatmap(gt_map))
    pm = as_heatmap(pred_map)
    if pm.shape != q.shape:
        raise ValueError(f"shape mismatch: {q.shape} vs {pm.shape}")
    if norm == "softmax":
        p = softmax_norm(pm)
    elif norm == "sum":
        p = sum_norm(pm)
    else:
        raise ValueError(f"unknown normalisation {norm!r}")
    p = np.maximum(p, P_FLOOR)
    nz = q > 0
    return max(float(np.sum(q[nz] * np.log(q[nz] / p[nz]))), 0.0)


def npd(gt_center, pred_map) -> float:
    """Distance from the predicted peak to ``gt_center`` (row, col), over the grid diagonal."""
    h = as_heatmap(pred_map)
    (i, j, _), _ = argmax_peak(h)
    return math.hypot(i - gt_center[0], j - gt_center[1]) / math.hypot(h.shape[0], h.shape[1])


def sweep_cumulative(values) -> np.ndarray:
    """Running mean: element ``k`` is the mean of the first ``k + 1`` values."""
    v = np.asarray(values, dtype=float)
    if v.size < 1:
        raise ValueError("need at least one value")
    return np.cumsum(v) / np.arange(1, v.size + 1)


@dataclass
class MetricsReport:
    accuracy: float | None = None
    robustness: float | None = None
    eao: float | None = None
    auc: float | None = None
    precision: float | None = None
    norm_precision: float | None = None
    kld: float | None = None
    npd: float | None = None
    failures: int | None = None

    def __post_init__(self):
        for name in ("accuracy", "auc", "precision", "norm_precision"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("robustness", "kld", "npd"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def reset_report(records: Sequence[RunRecord], interval=None) -> MetricsReport:
    a, r = accuracy_robustness(records)
    return MetricsReport(accuracy=a, robustness=r, eao=eao_lite(records, interval),
                         failures=sum(len(x.failures) for x in records))


def ope_report(records: Sequence[RunRecord], groundtruths) -> MetricsReport:
    auc, prec, norm = ope_curves(records, groundtruths)
    return MetricsReport(auc=auc, precision=prec, norm_precision=norm)
