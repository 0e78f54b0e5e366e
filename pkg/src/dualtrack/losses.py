"""Training-signal functions with analytic gradients.

Every loss returns ``(value, grad)`` where ``grad`` has the shape of the
prediction it differentiates. Label value ``-1`` marks ignored cells where a
loss supports it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .labels import IGNORE


@dataclass(frozen=True)
class LossConfig:
    alpha: int = 2
    beta: float = 4.0
    gamma: float = 2.0
    lambda_r: float = 1.0
    lambda_a: float = 10.0
    lambda_b: float = 1.2
    lambda_o: float = 1.2

    def __post_init__(self):
        if int(self.alpha) != self.alpha or self.alpha < 2 or self.alpha % 2:
            raise ValueError(f"alpha must be an even integer >= 2, got {self.alpha}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if min(self.lambda_r, self.lambda_a, self.lambda_b, self.lambda_o) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def weights(self) -> dict[str, float]:
        return {"r": self.lambda_r, "a": self.lambda_a, "b": self.lambda_b, "o": self.lambda_o}


@dataclass(frozen=True)
class ResidualParams:
    """Per-cell weight ``v``, mask ``m`` and target ``y`` of the discriminative residual."""
    v: np.ndarray
    m: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if not (self.v.shape == self.m.shape == self.y.shape):
            raise ValueError("v, m and y must share a shape")
        if np.any(self.v < 0):
            raise ValueError("v must be non-negative")
        if np.any((self.m < 0) | (self.m > 1)):
            raise ValueError("m must lie in [0, 1]")


def _check_prob(P):
    P = np.asarray(P, dtype=float)
    if np.any((P <= 0.0) | (P >= 1.0)):
        raise ValueError("probability domain: predictions must lie strictly inside (0, 1)")
    return P


def focal_loss(P, Y, gamma: float = 2.0):
    """Binary focal loss with positives and negatives averaged over their own counts."""
    P = _check_prob(P)
    Y = np.asarray(Y, dtype=float)
    pos = Y == 1.0
    neg = Y == 0.0
    grad = np.zeros_like(P)
    loss = 0.0
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_pos:
        p = P[pos]
        q = 1.0 - p
        loss += float(np.sum(-(q ** gamma) * np.log(p))) / n_pos
        dq = gamma * q ** (gamma - 1.0) * np.log(p) if gamma else 0.0
        grad[pos] = (dq - q ** gamma / p) / n_pos
    if n_neg:
        p = P[neg]
        loss += float(np.sum(-(p ** gamma) * np.log1p(-p))) / n_neg
        dp = -gamma * p ** (gamma - 1.0) * np.log1p(-p) if gamma else 0.0
        grad[neg] = (dp + p ** gamma / (1.0 - p)) / n_neg
    return loss, grad


def fc_pr_loss(P, Y, alpha: int = 2, beta: float = 4.0):
    """Penalty-reduced focal loss for continuous Gaussian targets (mean over cells)."""
    P = _check_prob(P)
    Y = np.asarray(Y, dtype=float)
    if np.any((Y < 0) | (Y > 1)):
        raise ValueError("FC_PR targets must lie in [0, 1]")
    n = P.size
    pos = Y == 1.0
    neg = ~pos
    q = 1.0 - P
    lval = np.empty_like(P)
    grad = np.empty_like(P)
    lval[pos] = -(q[pos] ** alpha) * np.log(P[pos])
    grad[pos] = alpha * q[pos] ** (alpha - 1) * np.log(P[pos]) - q[pos] ** alpha / P[pos]
    damp = (1.0 - Y[neg]) ** beta
    pn = P[neg]
    lval[neg] = -damp * pn ** alpha * np.log1p(-pn)
    grad[neg] = damp * (-alpha * pn ** (alpha - 1) * np.log1p(-pn) + pn ** alpha / (1.0 - pn))
    return float(lval.sum()) / n, grad / n


def fc_rg_loss(P, Y, alpha: int = 2, beta: float = 4.0):
    """Regressive focal loss ``mean(Y^b (Y-P)^a (-log P))``; zero exactly at ``P = Y``."""
    P = _check_prob(P)
    Y = np.asarray(Y, dtype=float)
    if alpha % 2:
        raise ValueError("alpha must be even")
    if np.any((Y <= 0) | (Y > 1)):
        raise ValueError("FC_RG targets must lie in (0, 1]")
    n = P.size
    yb = Y ** beta
    d = Y - P
    nlog = -np.log(P)
    loss = float(np.sum(yb * d ** alpha * nlog)) / n
    grad = -yb * (alpha * d ** (alpha - 1) * nlog + d ** alpha / P) / n
    return loss, grad


def disc_residual(P, params: ResidualParams):
    """Residual ``v * (m p + (1-m) max(0, p) - y)`` and its Jacobian diagonal.

    The subgradient of ``max(0, p)`` at ``p = 0`` is taken as 0.
    """
    P = np.asarray(P, dtype=float)
    if P.shape != params.v.shape:
        raise ValueError("prediction and residual parameters differ in shape")
    m, v = params.m, params.v
    active = P > 0
    r = v * (m * P + (1.0 - m) * np.maximum(P, 0.0) - params.y)
    jac = v * (m + (1.0 - m) * active)
    return r, jac


def hinge_l2_loss(P, Y, target_region):
    """Squared error on the target region; background only pays for positive scores."""
    P = np.asarray(P, dtype=float)
    Y = np.asarray(Y, dtype=float)
    region = np.asarray(target_region, dtype=bool)
    n = P.size
    diff = np.where(region, P - Y, np.maximum(P, 0.0))
    return float(np.sum(diff ** 2)) / n, 2.0 * diff / n


def l1_loss(pred, target, mask=None):
    """Mean absolute offset error over the cells selected by ``mask``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    d = pred - target
    if mask is None:
        sel = np.ones(d.shape, dtype=bool)
    else:
        sel = np.broadcast_to(np.asarray(mask, dtype=bool)[..., None], d.shape)
    count = int(sel.sum())
    grad = np.zeros_like(d)
    if count == 0:
        return 0.0, grad
    grad[sel] = np.sign(d[sel]) / count
    return float(np.abs(d[sel]).sum()) / count, grad


def bce_loss(pred, target, eps: float = 1e-6):
    """Mean binary cross-entropy; targets are clamped to ``[eps, 1 - eps]``."""
    p = _check_prob(pred)
    t = np.clip(np.asarray(target, dtype=float), eps, 1.0 - eps)
    n = p.size
    loss = float(np.sum(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)))) / n
    grad = (p - t) / (p * (1.0 - p)) / n
    return loss, grad


def combine_losses(components: dict[str, float], cfg: LossConfig = LossConfig()) -> float:
    w = cfg.weights
    return float(sum(w[k] * components[k] for k in ("r", "a", "b", "o")))


@dataclass
class TotalLoss:
    value: float
    components: dict[str, float] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def total_loss(s_r, y_r, s_a, y_a, box_pred, box_gt, iou_pred, iou_gt,
               cfg: LossConfig = LossConfig(), target_region=None) -> TotalLoss:
    """Weighted sum of the robust, accurate, box and IoU terms.

    Robust scores use the hinge-clipped L2 (``target_region`` defaults to
    ``y_r >= 0.5``), accurate scores the split-normalised focal loss, box
    offsets a mean L1 over cells labelled positive in ``y_a`` and the IoU slot
    binary cross-entropy. ``grads`` holds the gradient of the weighted total
    with respect to each prediction.
    """
    y_r = np.asarray(y_r, dtype=float)
    region = y_r >= 0.5 if target_region is None else target_region
    lr, gr = hinge_l2_loss(s_r, y_r, region)
    la, ga = focal_loss(s_a, y_a, cfg.gamma)
    positive = np.asarray(y_a) == 1.0
    lb, gb = l1_loss(box_pred, box_gt, positive)
    lo, go = bce_loss(iou_pred, iou_gt)
    comps = {"r": lr, "a": la, "b": lb, "o": lo}
    w = cfg.weights
    grads = {"s_r": w["r"] * gr, "s_a": w["a"] * ga, "box": w["b"] * gb, "iou": w["o"] * go}
    return TotalLoss(combine_losses(comps, cfg), comps, grads)


__all__ = [
    "IGNORE", "LossConfig", "ResidualParams", "TotalLoss", "bce_loss", "combine_losses",
    "disc_residual", "fc_pr_loss", "fc_rg_loss", "focal_loss", "hinge_l2_loss", "l1_loss",
    "total_loss",
]
