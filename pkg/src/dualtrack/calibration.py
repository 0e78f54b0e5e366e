"""Grid search of the per-layer weights over the probability simplex.

The score weights ``alpha`` only touch the accurate branch and the feature
weights ``beta`` only the robust one, so the search is one pass over the
``alpha`` grid (``beta`` fixed) followed by one pass over the ``beta`` grid
(best ``alpha`` fixed) instead of the full product grid.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from . import labels as lab
from .bench import SuiteItem, run_suite
from .correlation import LayerWeights
from .evaluation import eao_lite
from .gridmath import broadcast_anchor
from .losses import combine_losses, focal_loss, hinge_l2_loss
from .tracker import TrackerConfig, branch_maps, initialize, window_anchors

MIN_SEQUENCES = 3
LOSS_EVERY = 5
P_EPS = 1e-6


def simplex_grid(layers: int, step: float = 0.1) -> list[tuple[float, ...]]:
    """All weight vectors on the simplex whose entries are multiples of ``step``."""
    n = int(round(1.0 / step))
    if layers < 1 or n < 1 or abs(n * step - 1.0) > 1e-9:
        raise ValueError("need layers >= 1 and a step dividing 1")
    pts = []
    for combo in itertools.product(range(n + 1), repeat=layers - 1):
        if sum(combo) <= n:
            pts.append(tuple(c / n for c in combo) + ((n - sum(combo)) / n,))
    return pts


def loss_objective(items: list[SuiteItem], cfg: TrackerConfig) -> float:
    """Mean weighted robust + accurate training loss over every ``LOSS_EVERY``-th frame.

    Maps are computed around the previous groundtruth box with the state
    built on frame 0; the box and IoU terms do not depend on the layer
    weights and are left out.
    """
    total, count = 0.0, 0
    for item in items:
        state = initialize(item.frames[0], item.groundtruth[0], cfg)
        for t in range(LOSS_EVERY, len(item.frames), LOSS_EVERY):
            gt = item.groundtruth[t]
            pyr = item.frames[t].features
            maps = branch_maps(state, pyr, item.groundtruth[t - 1], cfg)
            win = maps.window
            center = win.to_cells(gt.cx, gt.cy)
            comps = {"r": 0.0, "a": 0.0, "b": 0.0, "o": 0.0}
            if maps.robust is not None:
                y = lab.gaussian_label(win.cells, win.cells, center, cfg.labels.sigma_for(gt, pyr.stride))
                y = broadcast_anchor(y, maps.robust.shape[2])
                comps["r"], _ = hinge_l2_loss(maps.robust, y, y >= 0.5)
            if maps.accurate is not None:
                a = maps.accurate.shape[2]
                grid = window_anchors(win, item.groundtruth[t - 1], a, cfg.anchor_ratios)
                y = lab.assign_atss(grid, gt, cfg.labels.topk_for(a), cfg.labels.atss_variant)
                comps["a"], _ = focal_loss(np.clip(maps.accurate, P_EPS, 1.0 - P_EPS), y, cfg.losses.gamma)
            total += combine_losses(comps, cfg.losses)
            count += 1
    return total / max(count, 1)


def score(items: list[SuiteItem], cfg: TrackerConfig, objective: str = "eao") -> float:
    """Higher is better for both objectives."""
    if objective == "eao":
        return eao_lite(run_suite(cfg, items, "reset"))
    if objective == "loss":
        return -loss_objective(items, cfg)
    raise ValueError(f"unknown calibration objective {objective!r}")


@dataclass
class CalibrationResult:
    weights: LayerWeights
    alpha_scores: list[tuple[tuple[float, ...], float]]
    beta_scores: list[tuple[tuple[float, ...], float]]
    objective: str

    def to_dict(self) -> dict:
        return {
            "alpha": list(self.weights.alpha),
            "beta": list(self.weights.beta),
            "objective": self.objective,
            "alpha_scores": [[list(w), s] for w, s in self.alpha_scores],
            "beta_scores": [[list(w), s] for w, s in self.beta_scores],
        }


def _best(scored):
    # ties go to the most concentrated weights, then to grid order
    top = max(s for _, s in scored)
    tied = [w for w, s in scored if s >= top - 1e-12]
    return max(tied, key=lambda w: (max(w), -tied.index(w)))


def calibrate(items: list[SuiteItem], cfg: TrackerConfig = TrackerConfig(), step: float = 0.1,
              objective: str = "eao") -> CalibrationResult:
    if len(items) < MIN_SEQUENCES:
        raise ValueError(f"calibration needs at least {MIN_SEQUENCES} sequences, got {len(items)}")
    layers = items[0].frames[0].features.num_layers
    grid = simplex_grid(layers, step)
    base = cfg.layer_weights
    if len(base.alpha) != layers:
        base = LayerWeights((1.0 / layers,) * layers, (1.0 / layers,) * layers)

    def run(lw):
        return score(items, replace(cfg, layer_weights=lw), objective)

    alpha_scores = [(a, run(LayerWeights(a, base.beta))) for a in grid] if cfg.accurate_enabled else []
    alpha = _best(alpha_scores) if alpha_scores else base.alpha
    beta_scores = [(b, run(LayerWeights(alpha, b))) for b in grid] if cfg.robust_enabled else []
    beta = _best(beta_scores) if beta_scores else base.beta
    return CalibrationResult(LayerWeights(alpha, beta), alpha_scores, beta_scores, objective)
