"""Synthetic tracking sequences: one target plus distractors with groundtruth.

Objects follow damped random-walk motion with a log-scale random walk on
their size. Each object carries a unit identity vector; distractor
identities are kept away from the target's (inner product below
``MAX_IDENTITY_OVERLAP``). The target can be flagged occluded per frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box

MAX_IDENTITY_OVERLAP = 0.3
DAMPING = 0.9


@dataclass(frozen=True, eq=False)
class SceneObject:
    id: int
    identity: np.ndarray
    box: Box
    velocity: tuple[float, float] = (0.0, 0.0)
    visible: bool = True


@dataclass(frozen=True, eq=False)
class SceneState:
    frame_size: tuple[int, int]  # (width, height)
    objects: tuple[SceneObject, ...]
    target_index: int = 0
    frame_index: int = 0

    def __post_init__(self):
        # an object-free scene is allowed as a degenerate background-only frame
        if self.objects and not 0 <= self.target_index < len(self.objects):
            raise ValueError("target_index does not name an object")

    @property
    def target(self) -> SceneObject:
        return self.objects[self.target_index]

    @property
    def occluded(self) -> bool:
        return bool(self.objects) and not self.target.visible

    def to_dict(self) -> dict:
        return {
            "frame": self.frame_index,
            "frame_size": list(self.frame_size),
            "target_index": self.target_index,
            "objects": [
                {"id": o.id, "identity": [float(v) for v in o.identity],
                 "box": [o.box.cx, o.box.cy, o.box.w, o.box.h],
                 "velocity": list(o.velocity), "visible": o.visible}
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneState":
        objs = tuple(
            SceneObject(int(o["id"]), np.asarray(o["identity"], dtype=float), Box(*map(float, o["box"])),
                        tuple(float(v) for v in o["velocity"]), bool(o["visible"]))
            for o in d["objects"]
        )
        return cls(tuple(int(v) for v in d["frame_size"]), objs, int(d["target_index"]), int(d["frame"]))


@dataclass(frozen=True)
class SimConfig:
    length: int = 120
    distractors: int = 2
    motion_sigma: float = 1.5
    scale_walk_sigma: float = 0.01
    occlusion_prob: float = 0.0
    seed: int = 0
    # spring constant pulling distractors towards the target (per frame^2)
    distractor_pull: float = 0.01
    frame_size: int = 256
    min_size: float = 40.0
    max_size: float = 60.0
    identity_dim: int = 8
    background: float = 60.0
    background_noise: float = 8.0

    def __post_init__(self):
        if self.length < 2:
            raise ValueError("sequence length must be >= 2")
        if self.distractors < 0:
            raise ValueError("distractor count must be >= 0")
        if min(self.motion_sigma, self.scale_walk_sigma, self.background_noise, self.distractor_pull) < 0:
            raise ValueError("noise levels must be non-negative")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must lie in [0, 1]")
        if not 0 < self.min_size <= self.max_size < self.frame_size / 2:
            raise ValueError("object sizes must satisfy 0 < min <= max < frame/2")
        if self.identity_dim < 1:
            raise ValueError("identity_dim must be >= 1")


@dataclass
class Sequence:
    scenes: list[SceneState]
    groundtruth: list[Box]
    config: SimConfig = field(default_factory=SimConfig)

    def __len__(self) -> int:
        return len(self.groundtruth)

    @property
    def occluded(self) -> list[bool]:
        return [s.occluded for s in self.scenes]


def _unit(rng, dim):
    while True:
        v = rng.normal(size=dim)
        n = np.linalg.norm(v)
        if n > 1e-9:
            return v / n


def _identities(rng, count, dim):
    target = _unit(rng, dim)
    out = [target]
    for _ in range(count):
        for _attempt in range(1000):
            v = _unit(rng, dim)
            if float(v @ target) < MAX_IDENTITY_OVERLAP:
                break
        else:  # pragma: no cover - only reachable for dim == 1
            raise ValueError(f"cannot draw distractor identity in {dim} dims")
        assert float(v @ target) < MAX_IDENTITY_OVERLAP
        out.append(v)
    return out


def _clamp_center(c, half, size):
    return min(max(c, half), size - half)


def _initial_boxes(rng, cfg: SimConfig, n):
    fs = cfg.frame_size
    boxes = []
    for k in range(n):
        for _attempt in range(200):
            w = rng.uniform(cfg.min_size, cfg.max_size)
            h = float(np.clip(w * math.exp(rng.uniform(-0.3, 0.3)), cfg.min_size * 0.75, cfg.max_size * 1.25))
            if k == 0:
                cx, cy = rng.uniform(0.4, 0.6, size=2) * fs
            else:
                cx = rng.uniform(w / 2, fs - w / 2)
                cy = rng.uniform(h / 2, fs - h / 2)
            box = Box(float(cx), float(cy), float(w), float(h))
            # keep clear of every earlier object
            if all(abs(box.cx - b.cx) > (box.w + b.w) / 2 + 4 or abs(box.cy - b.cy) > (box.h + b.h) / 2 + 4
                   for b in boxes):
                break
        boxes.append(box)
    return boxes


def gen_sequence(cfg: SimConfig = SimConfig()) -> Sequence:
    """Generate a deterministic sequence of scenes and target groundtruth boxes."""
    rng = np.random.default_rng(cfg.seed)
    n = 1 + cfg.distractors
    ids = _identities(rng, cfg.distractors, cfg.identity_dim)
    boxes = _initial_boxes(rng, cfg, n)
    base = [(b.w, b.h) for b in boxes]
    log_scale = np.zeros(n)
    vel = np.zeros((n, 2))
    pos = np.array([[b.cx, b.cy] for b in boxes])
    fs = float(cfg.frame_size)
    scenes, gt = [], []
    for t in range(cfg.length):
        if t > 0:
            vel = DAMPING * vel
            if cfg.motion_sigma:
                vel = vel + rng.normal(0.0, cfg.motion_sigma, size=(n, 2))
            vel[1:] += cfg.distractor_pull * (pos[0] - pos[1:])
            pos = pos + vel
            if cfg.scale_walk_sigma:
                log_scale = np.clip(log_scale + rng.normal(0.0, cfg.scale_walk_sigma, size=n),
                                    math.log(0.7), math.log(1.4))
        occluded = t > 0 and cfg.occlusion_prob > 0 and rng.random() < cfg.occlusion_prob
        objs = []
        for k in range(n):
            w = base[k][0] * math.exp(log_scale[k])
            h = base[k][1] * math.exp(log_scale[k])
            for axis, half in ((0, w / 2), (1, h / 2)):
                c = _clamp_center(pos[k, axis], half, fs)
                if c != pos[k, axis]:
                    vel[k, axis] = -vel[k, axis]
                    pos[k, axis] = c
            box = Box(float(pos[k, 0]), float(pos[k, 1]), float(w), float(h))
            objs.append(SceneObject(k, ids[k], box, (float(vel[k, 0]), float(vel[k, 1])),
                                    visible=not (k == 0 and occluded)))
        scenes.append(SceneState((cfg.frame_size, cfg.frame_size), tuple(objs), 0, t))
        gt.append(objs[0].box)
    return Sequence(scenes, gt, cfg)


def render_frame(scene: SceneState, frame_size=None, seed: int = 0,
                 background: float = 60.0, noise: float = 8.0) -> np.ndarray:
    """Grayscale ``uint8`` frame: textured rectangles over a noisy background.

    Each object's grating orientation and period derive from its identity
    vector; occluded objects are left out (the background overdraws them).
    """
    w, h = scene.frame_size if frame_size is None else (frame_size, frame_size)
    rng = np.random.default_rng([seed, scene.frame_index])
    img = background + rng.normal(0.0, noise, size=(h, w))
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    for obj in scene.objects:
        if not obj.visible:
            continue
        x0, y0, x1, y1 = obj.box.to_xyxy()
        inside = (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
        ident = obj.identity
        theta = math.atan2(ident[1 % ident.size], ident[0])
        period = 6.0 + 6.0 * abs(ident[2 % ident.size])
        phase = (xx - obj.box.cx) * math.cos(theta) + (yy - obj.box.cy) * math.sin(theta)
        tex = 150.0 + 60.0 * np.sign(np.sin(2 * math.pi * phase / period))
        img = np.where(inside, tex, img)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)
