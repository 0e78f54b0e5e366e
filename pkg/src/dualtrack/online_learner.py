"""Online filter learning for the robust branch.

The filter ``theta`` of shape ``(A, C, k, k)`` is fitted to a bounded
support set of ``(feature, residual parameters, weight)`` entries by
steepest descent with a Gauss-Newton step length:

    theta <- theta - lr * (g.g / g.Q.g) * g,    Q = J^T J (+ reg I)

where ``J`` is the Jacobian of the stacked discriminative residuals. The
hinge branch ``max(0, p)`` is frozen at the activation pattern of the
current iterate, so each step exactly minimises the resulting quadratic
along ``-g``.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from .correlation import im2col
from .gridmath import adaptive_avg_pool
from .losses import ResidualParams

KERNEL_SIZE = 5


@dataclass(frozen=True)
class OnlineLearnerConfig:
    capacity: int = 50
    init_iterations: int = 10
    periodic_lr: float = 0.1
    periodic_iters: int = 2
    periodic_every: int = 20
    hard_lr: float = 0.2
    hard_iters: int = 1
    distractor_ratio: float = 0.8
    lost_ratio: float = 0.25
    distractor_radius: float = 3.0
    hard_sample_weight: float = 0.5
    reg: float = 0.01

    def __post_init__(self):
        for name in ("capacity", "init_iterations", "periodic_iters", "periodic_every", "hard_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("periodic_lr", "hard_lr", "distractor_radius", "hard_sample_weight"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("distractor_ratio", "lost_ratio"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.reg < 0:
            raise ValueError("reg must be non-negative")


@dataclass(frozen=True, eq=False)
class OnlineFilter:
    weights: np.ndarray  # (A, C, k, k)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim == 3:
            w = w[None]
        if w.ndim != 4 or not np.all(np.isfinite(w)):
            raise ValueError("filter weights must be a finite AxCxkxk array")
        object.__setattr__(self, "weights", w)

    @property
    def num_outputs(self) -> int:
        return self.weights.shape[0]


def init_filter(template_feature, num_outputs: int = 1, size: int = KERNEL_SIZE) -> OnlineFilter:
    """Adaptive-average-pool a ``(C, H, W)`` template to ``size x size``, copied per output."""
    pooled = adaptive_avg_pool(template_feature, size, size)
    return OnlineFilter(np.repeat(pooled[None], num_outputs, axis=0))


@dataclass(eq=False)
class SupportEntry:
    cols: np.ndarray  # im2col matrix of the feature, (S*S, C*k*k)
    params: ResidualParams  # (S, S, A)
    weight: float
    initial: bool = False


class SupportSet:
    """Bounded sample memory; entries flagged ``initial`` are never evicted."""

    def __init__(self, capacity: int = 50, kernel_size: int = KERNEL_SIZE):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.kernel_size = kernel_size
        self.entries: deque[SupportEntry] = deque()
        self._shape: tuple | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def copy(self) -> "SupportSet":
        dup = SupportSet(self.capacity, self.kernel_size)
        dup.entries = deque(self.entries)
        dup._shape = self._shape
        return dup

    def push(self, feature, params: ResidualParams, weight: float = 1.0,
             initial: bool = False) -> "SupportSet":
        feature = np.asarray(feature, dtype=float)
        if self._shape is not None and feature.shape != self._shape:
            raise ValueError(f"feature shape {feature.shape} differs from support set {self._shape}")
        if weight < 0:
            raise ValueError("sample weight must be non-negative")
        k = self.kernel_size
        out_h, out_w = feature.shape[1] - k + 1, feature.shape[2] - k + 1
        if params.y.shape[:2] != (out_h, out_w):
            raise ValueError(f"label grid {params.y.shape[:2]} does not match output grid {(out_h, out_w)}")
        self._shape = feature.shape
        self.entries.append(SupportEntry(im2col(feature, k, k), params, float(weight), initial))
        if len(self.entries) > self.capacity:
            self._evict()
        return self

    def _evict(self) -> None:
        for idx, entry in enumerate(self.entries):
            if not entry.initial:
                del self.entries[idx]
                return
        raise ValueError("support set is full of protected initial entries")


def support_push(support: SupportSet, feature, params: ResidualParams, weight: float = 1.0,
                 initial: bool = False) -> SupportSet:
    return support.push(feature, params, weight, initial)


@dataclass
class _Stacked:
    X: np.ndarray        # (rows, P)
    w: np.ndarray        # (rows, 1)
    v: np.ndarray        # (rows, A)
    m: np.ndarray
    vy: np.ndarray

    @classmethod
    def build(cls, support: SupportSet) -> "_Stacked":
        if not len(support):
            raise ValueError("support set is empty")
        X = np.concatenate([e.cols for e in support.entries], axis=0)
        w = np.concatenate([np.full(e.cols.shape[0], e.weight) for e in support.entries])[:, None]
        a = support.entries[0].params.v.shape[2]
        v = np.concatenate([e.params.v.reshape(-1, a) for e in support.entries])
        m = np.concatenate([e.params.m.reshape(-1, a) for e in support.entries])
        y = np.concatenate([e.params.y.reshape(-1, a) for e in support.entries])
        return cls(X, w, v, m, v * y)

    def jac_diag(self, p: np.ndarray) -> np.ndarray:
        return self.v * (self.m + (1.0 - self.m) * (p > 0))


def _theta(filt: OnlineFilter) -> np.ndarray:
    return filt.weights.reshape(filt.num_outputs, -1).T  # (P, A)


def _from_theta(theta: np.ndarray, like: OnlineFilter) -> OnlineFilter:
    return OnlineFilter(theta.T.reshape(like.weights.shape))


def objective(filt: OnlineFilter, support: SupportSet, reg: float = 0.0, frozen_from=None) -> float:
    """``1/2 sum_j w_j ||r_j||^2 + reg/2 ||theta||^2``.

    With ``frozen_from`` (another filter) the hinge activation pattern is
    taken from that filter's predictions instead of the evaluated one.
    """
    st = _Stacked.build(support)
    return _objective(st, _theta(filt), reg, None if frozen_from is None else _theta(frozen_from))


def _objective(st: _Stacked, theta, reg, frozen_theta=None) -> float:
    p = st.X @ theta
    d = st.jac_diag(p if frozen_theta is None else st.X @ frozen_theta)
    r = d * p - st.vy
    return 0.5 * float(np.sum(st.w * r * r)) + 0.5 * reg * float(np.sum(theta * theta))


@dataclass
class StepResult:
    filter: OnlineFilter
    loss_before: float
    loss_after: float
    converged: bool = False


def _step(st: _Stacked, theta: np.ndarray, reg: float, lr_scale: float):
    p = st.X @ theta
    d = st.jac_diag(p)
    r = d * p - st.vy
    before = 0.5 * float(np.sum(st.w * r * r)) + 0.5 * reg * float(np.sum(theta * theta))
    g = st.X.T @ (st.w * d * r) + reg * theta
    gg = float(np.sum(g * g))
    if gg == 0.0:
        return theta, before, before, True
    jg = d * (st.X @ g)
    gqg = float(np.sum(st.w * jg * jg)) + reg * gg
    if gqg <= 0.0:
        return theta, before, before, True
    new = theta - lr_scale * (gg / gqg) * g
    # the frozen-activation objective is quadratic along -g, so evaluate it in closed form
    r_new = r - lr_scale * (gg / gqg) * jg
    after = 0.5 * float(np.sum(st.w * r_new * r_new)) + 0.5 * reg * float(np.sum(new * new))
    return new, before, after, False


def sgd_step(filt: OnlineFilter, support: SupportSet, reg: float = 0.0,
             lr_scale: float = 1.0) -> StepResult:
    """One steepest-descent step with the Gauss-Newton step length.

    ``loss_after`` is the frozen-activation objective at the new filter, which
    never exceeds ``loss_before`` for ``0 <= lr_scale <= 2``.
    """
    st = _Stacked.build(support)
    theta, before, after, converged = _step(st, _theta(filt), reg, lr_scale)
    out = filt if converged else _from_theta(theta, filt)
    return StepResult(out, before, after, converged)


def optimize(filt: OnlineFilter, support: SupportSet, iterations: int, lr_scale: float = 1.0,
             reg: float = 0.0, history: list | None = None) -> OnlineFilter:
    """Apply ``iterations`` steepest-descent steps, each scaled by ``lr_scale``."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    st = _Stacked.build(support)
    theta = _theta(filt)
    for _ in range(iterations):
        theta, before, after, converged = _step(st, theta, reg, lr_scale)
        if history is not None:
            history.append((before, after))
        if converged:
            break
    return _from_theta(theta, filt)


def predict(filt: OnlineFilter, feature) -> np.ndarray:
    """Filter response on a ``(C, H, W)`` feature grid as an ``(H', W', A)`` heatmap."""
    k = filt.weights.shape[-1]
    feature = np.asarray(feature, dtype=float)
    cols = im2col(feature, k, k)
    ho, wo = feature.shape[1] - k + 1, feature.shape[2] - k + 1
    return (cols @ _theta(filt)).reshape(ho, wo, filt.num_outputs)


class UpdateKind(enum.Enum):
    PERIODIC = "periodic"
    HARD = "hard"


@dataclass(frozen=True)
class UpdatePlan:
    kind: UpdateKind
    lr: float
    iterations: int


def schedule_update(frame_index: int, distractor_flag: bool, lost_flag: bool,
                    cfg: OnlineLearnerConfig = OnlineLearnerConfig()) -> UpdatePlan | None:
    """Lost frames are skipped; distractors trigger a hard update ahead of the periodic one."""
    if frame_index < 1:
        raise ValueError("frame_index must be >= 1")
    if lost_flag:
        return None
    if distractor_flag:
        return UpdatePlan(UpdateKind.HARD, cfg.hard_lr, cfg.hard_iters)
    if frame_index % cfg.periodic_every == 0:
        return UpdatePlan(UpdateKind.PERIODIC, cfg.periodic_lr, cfg.periodic_iters)
    return None


def detect_distractor(robust_map, target_cell, ratio: float = 0.8, radius: float = 3.0) -> bool:
    """True when a local maximum farther than ``radius`` cells from the target beats ``ratio * peak``."""
    h = np.asarray(robust_map, dtype=float)
    if h.ndim == 3:
        h = h.max(axis=2)
    ti, tj = target_cell[0], target_cell[1]
    peak = h[ti, tj]
    local_max = h == maximum_filter(h, size=3, mode="constant", cval=-np.inf)
    ii, jj = np.nonzero(local_max)
    far = np.hypot(ii - ti, jj - tj) > radius
    return bool(np.any(h[ii[far], jj[far]] > ratio * peak))


__all__ = [
    "KERNEL_SIZE", "OnlineFilter", "OnlineLearnerConfig", "StepResult", "SupportEntry",
    "SupportSet", "UpdateKind", "UpdatePlan", "detect_distractor", "init_filter", "objective",
    "optimize", "predict", "schedule_update", "sgd_step", "support_push",
]
