"""On-disk formats: sequence directories, run records and reports.

A sequence directory holds ``groundtruth.txt`` (one ``x,y,w,h`` top-left
line per frame), ``meta.json`` and either ``scene.jsonl`` (oracle mode, one
scene per line) or ``%08d.pgm`` frames (image mode). Every writer goes
through a temp file and ``os.replace`` so readers never see partial files.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import RunRecord
from .geometry import Box
from .sim import SceneState

GT_FILE = "groundtruth.txt"
META_FILE = "meta.json"
SCENE_FILE = "scene.jsonl"
FRAME_PATTERN = "{:08d}.pgm"


class FormatError(ValueError):
    """Malformed data file (maps to CLI exit code 4)."""


def atomic_write(path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj) -> str:
    """Canonical JSON text: sorted keys, fixed indent, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def _num(v: float) -> str:
    # repr is locale independent and round-trips exactly
    return repr(float(v))


# ------------------------------------------------------------------ PGM


def write_pgm(path, img) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM writer takes a 2-D uint8 array")
    h, w = img.shape
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: bad PGM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported")
    pixels = data[pos + 1:pos + 1 + w * h]
    if len(pixels) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixels, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


# ------------------------------------------------------------------ sequences


def format_groundtruth(boxes) -> str:
    return "".join(",".join(_num(v) for v in b.to_xywh()) + "\n" for b in boxes)


def parse_groundtruth(text: str, source: str = "groundtruth") -> list[Box]:
    boxes = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise FormatError(f"{source}:{n}: expected 'x,y,w,h', got {line!r}")
        try:
            x, y, w, h = (float(p) for p in parts)
            boxes.append(Box.from_xywh(x, y, w, h))
        except ValueError as exc:
            raise FormatError(f"{source}:{n}: {exc}") from None
    return boxes


@dataclass
class SequenceData:
    name: str
    groundtruth: list[Box]
    meta: dict = field(default_factory=dict)
    scenes: list[SceneState] | None = None
    images: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.groundtruth)

    @property
    def seed(self) -> int:
        return int(self.meta.get("seed", 0))


def write_sequence(out_dir, groundtruth, meta: dict, scenes=None, images=None) -> Path:
    """Write a sequence directory; pass ``scenes`` (oracle) and/or ``images`` (image mode)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(groundtruth)
    if scenes is not None:
        if len(scenes) != n:
            raise ValueError("scene count differs from groundtruth length")
        atomic_write(out / SCENE_FILE, "".join(json.dumps(s.to_dict(), sort_keys=True) + "\n" for s in scenes))
    if images is not None:
        if len(images) != n:
            raise ValueError("frame count differs from groundtruth length")
        for k, img in enumerate(images):
            write_pgm(out / FRAME_PATTERN.format(k), img)
    atomic_write(out / GT_FILE, format_groundtruth(groundtruth))
    atomic_write(out / META_FILE, dumps(meta))
    return out


def read_sequence(seq_dir) -> SequenceData:
    d = Path(seq_dir)
    if not d.is_dir():
        raise FormatError(f"{d}: not a sequence directory")
    try:
        gt = parse_groundtruth((d / GT_FILE).read_text(encoding="utf-8"), str(d / GT_FILE))
        meta = json.loads((d / META_FILE).read_text(encoding="utf-8")) if (d / META_FILE).exists() else {}
    except FileNotFoundError as exc:
        raise FormatError(f"{d}: missing {Path(exc.filename).name}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d / META_FILE}: {exc}") from None
    if len(gt) < 2:
        raise FormatError(f"{d}: need at least two groundtruth boxes")
    scenes = images = None
    if (d / SCENE_FILE).exists():
        try:
            scenes = [SceneState.from_dict(json.loads(line))
                      for line in (d / SCENE_FILE).read_text(encoding="utf-8").splitlines() if line.strip()]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{d / SCENE_FILE}: {exc}") from None
        if len(scenes) != len(gt):
            raise FormatError(f"{d}: {len(scenes)} scenes but {len(gt)} groundtruth boxes")
    frames = sorted(d.glob("*.pgm"))
    if frames:
        if len(frames) != len(gt):
            raise FormatError(f"{d}: {len(frames)} frames but {len(gt)} groundtruth boxes")
        images = [read_pgm(f) for f in frames]
    if scenes is None and images is None:
        raise FormatError(f"{d}: neither {SCENE_FILE} nor .pgm frames found")
    return SequenceData(d.name, gt, meta, scenes, images)


# ------------------------------------------------------------------ run records


def record_to_dict(rec: RunRecord, frames: list | None = None) -> dict:
    out = {
        "sequence": rec.sequence,
        "boxes": [None if b is None else list(b.to_xywh()) for b in rec.boxes],
        "overlaps": [float(o) for o in rec.overlaps],
        "failures": [int(f) for f in rec.failures],
        "config": rec.config,
    }
    if frames is not None:
        out["frames"] = frames
    return out


def record_from_dict(d: dict, source: str = "record") -> RunRecord:
    try:
        boxes = [None if b is None else Box.from_xywh(*map(float, b)) for b in d["boxes"]]
        return RunRecord(str(d["sequence"]), boxes, [float(o) for o in d["overlaps"]],
                         [int(f) for f in d["failures"]], dict(d.get("config", {})))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{source}: {exc}") from None


def write_record(path, rec: RunRecord, frames: list | None = None) -> None:
    atomic_write(path, dumps(record_to_dict(rec, frames)))


def read_record(path) -> RunRecord:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not isinstance(d, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return record_from_dict(d, str(path))
