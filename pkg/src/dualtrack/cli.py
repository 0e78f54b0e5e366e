"""``dualtrack`` command line: simulate, track, eval, ablate, calibrate.

Exit codes: 0 ok, 2 bad configuration or arguments, 3 I/O failure,
4 malformed input data.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import SuiteItem, run_suite
from .calibration import MIN_SEQUENCES, calibrate
from .config import CliConfig, ConfigError, apply, flatten, load_config
from .evaluation import (accuracy_robustness, eao_lite, ope_curves, ope_report, reset_report, run_ope,
                         run_reset_protocol, sweep_cumulative)
from .features import image_features, synth_features
from .formats import (GT_FILE, FormatError, atomic_write, dumps, read_record, read_sequence,
                      record_to_dict, write_sequence)
from .geometry import Box
from .gridmath import write_heatmap
from .sim import gen_sequence, render_frame
from .tracker import DualModalTracker, Frame

log = logging.getLogger("dualtrack")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DATA = 0, 2, 3, 4
CSV_HEADER = ["param", "value", "A", "R", "eao", "auc"]
METRIC_COLUMNS = CSV_HEADER[2:]


class UsageError(ValueError):
    """Bad command-line usage that argparse cannot catch (exit 2)."""


# ------------------------------------------------------------------ helpers


def _config(args) -> CliConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _meta(cfg: CliConfig, seed: int) -> dict:
    return {"tool": "dualtrack", "version": __version__, "seed": seed, "mode": cfg.features.mode,
            "config": flatten(cfg)}


def build_frames(seq, cfg: CliConfig, seed_override: int | None = None) -> list[Frame]:
    """Feature frames for a loaded sequence under ``cfg.features``."""
    fcfg = cfg.features
    if seed_override is None:
        fcfg = replace(fcfg, seed=seq.seed)
    if fcfg.mode == "oracle":
        if seq.scenes is None:
            raise FormatError(f"{seq.name}: oracle features need scene.jsonl")
        return [Frame(synth_features(sc, fcfg), sc) for sc in seq.scenes]
    if seq.images is None:
        raise FormatError(f"{seq.name}: image features need .pgm frames")
    return [Frame(image_features(img, fcfg)) for img in seq.images]


def _sequence_dirs(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if (p / GT_FILE).exists():
            out.append(p)
        elif p.is_dir():
            subs = sorted(d for d in p.iterdir() if (d / GT_FILE).exists())
            if not subs:
                raise FormatError(f"{p}: no sequence directories found")
            out.extend(subs)
        else:
            raise FormatError(f"{p}: not a sequence directory")
    return out


def load_items(paths, cfg: CliConfig, seed_override=None) -> list[SuiteItem]:
    items = []
    for d in _sequence_dirs(paths):
        seq = read_sequence(d)
        items.append(SuiteItem(seq.name, build_frames(seq, cfg, seed_override), list(seq.groundtruth)))
    return items


class _Recorder:
    """Tracker wrapper that logs per-frame results under absolute frame indices."""

    def __init__(self, cfg, index: dict, log_rows: dict, dump_dir):
        self.inner = DualModalTracker(cfg)
        self.index = index
        self.rows = log_rows
        self.dump_dir = dump_dir

    def init(self, frame, box: Box):
        self.inner.init(frame, box)
        k = self.index[id(frame)]
        self.rows[k] = {"frame": k, "box": list(box.to_xywh()), "peak": None, "lost": False, "init": True}

    def track(self, frame):
        res = self.inner.track(frame)
        k = self.index[id(frame)]
        self.rows[k] = {"frame": k, "box": list(res.box.to_xywh()), "peak": res.peak_value,
                        "lost": bool(res.lost), "init": False}
        if self.dump_dir is not None:
            write_heatmap(Path(self.dump_dir) / f"{k:08d}.txt", res.fused)
        return res


def track_sequence(seq, cfg: CliConfig, protocol: str = "reset", dump_dir=None, seed_override=None):
    """Run one tracker config over a loaded sequence; returns ``(record, frame_rows)``."""
    frames = build_frames(seq, cfg, seed_override)
    index = {id(f): k for k, f in enumerate(frames)}
    rows: dict = {}
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)

    def factory():
        return _Recorder(cfg.tracker, index, rows, dump_dir)

    config = flatten(cfg)
    if protocol == "reset":
        rec = run_reset_protocol(factory, frames, seq.groundtruth, cfg.protocol.reinit_delay,
                                 cfg.protocol.burn_in, sequence=seq.name, config=config)
    elif protocol == "ope":
        rec = run_ope(factory, frames, seq.groundtruth, sequence=seq.name, config=config)
    else:
        raise UsageError(f"unknown protocol {protocol!r}")
    return rec, [rows[k] for k in sorted(rows)]


def _parse_range(key: str, text: str) -> list[str]:
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"range for {key} must be start:stop:step")
    try:
        lo, hi, st = (float(p) for p in parts)
    except ValueError:
        raise UsageError(f"range for {key} must be numeric: {text!r}") from None
    if not st > 0 or hi < lo:
        raise UsageError(f"range for {key} needs step > 0 and stop >= start")
    n = int(np.floor((hi - lo) / st + 1e-9)) + 1
    return [repr(round(lo + k * st, 10)) for k in range(n)]


def parse_sweep(spec: str) -> list[dict[str, str]]:
    """Parameter sets from ``key=a:b:step``, ``key=v1|v2|...`` or a grid file path.

    Grid files hold one parameter set per line as ``key=value`` pairs
    separated by ``;``.
    """
    p = Path(spec)
    if p.is_file():
        sets = []
        for n, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            row = {}
            for pair in line.split(";"):
                key, sep, value = pair.partition("=")
                if not sep or not key.strip():
                    raise UsageError(f"{p}:{n}: expected key=value pairs separated by ';'")
                row[key.strip()] = value.strip()
            sets.append(row)
        if not sets:
            raise UsageError(f"{p}: empty sweep grid")
        return sets
    key, sep, values = spec.partition("=")
    key = key.strip()
    if not sep or not key or not values.strip():
        raise UsageError(f"malformed sweep spec {spec!r}")
    if ":" in values:
        vals = _parse_range(key, values)
    else:
        vals = [v.strip() for v in values.split("|") if v.strip()]
    return [{key: v} for v in vals]


def _int_or_none(v):
    try:
        return int(v)
    except (TypeError, ValueError):
        return None


def _fmt(v) -> str:
    return "nan" if v is None else repr(float(v))


# ------------------------------------------------------------------ commands


def cmd_simulate(args) -> int:
    cfg = _config(args)
    count = args.count
    if count < 1:
        raise UsageError("--count must be >= 1")
    out = Path(args.out)
    for k in range(count):
        seed = cfg.sim.seed + k
        sim = replace(cfg.sim, seed=seed)
        seq = gen_sequence(sim)
        target = out if count == 1 else out / f"sim-{seed:04d}"
        scenes = images = None
        if cfg.features.mode == "oracle":
            scenes = seq.scenes
        else:
            images = [render_frame(sc, seed=seed, background=sim.background, noise=sim.background_noise)
                      for sc in seq.scenes]
        write_sequence(target, seq.groundtruth, _meta(replace(cfg, sim=sim), seed), scenes, images)
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = _config(args)
    seq = read_sequence(args.seq)
    rec, rows = track_sequence(seq, cfg, args.protocol, args.dump_heatmaps, args.seed)
    d = record_to_dict(rec, rows)
    d["groundtruth"] = [list(b.to_xywh()) for b in seq.groundtruth]
    atomic_write(args.out, dumps(d))
    return EXIT_OK


def _load_runs(paths):
    records, gts = [], []
    for p in paths:
        rec = read_record(p)
        d = json.loads(Path(p).read_text(encoding="utf-8"))
        gt = d.get("groundtruth")
        if gt is not None:
            try:
                gt = [Box.from_xywh(*map(float, b)) for b in gt]
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{p}: groundtruth: {exc}") from None
            if len(gt) != len(rec):
                raise FormatError(f"{p}: groundtruth and boxes differ in length")
        records.append(rec)
        gts.append(gt)
    return records, gts


def evaluate(records, gts, protocol: str) -> dict:
    for r in records:
        made = r.config.get("protocol")
        if made is not None and made != protocol:
            raise FormatError(f"{r.sequence}: run was recorded under protocol {made!r}, not {protocol!r}")
    if protocol == "reset":
        rep = reset_report(records)
    elif protocol == "ope":
        if any(g is None for g in gts):
            raise FormatError("one-pass evaluation needs groundtruth in every run file")
        rep = ope_report(records, gts)
    else:
        raise UsageError(f"unknown protocol {protocol!r}")
    configs = [r.config for r in records]
    out = rep.to_dict()
    out.update({
        "tool": "dualtrack", "version": __version__, "protocol": protocol,
        "sequences": [r.sequence for r in records],
        "seed": _int_or_none(records[0].config.get("tracker.seed")),
        "config": configs[0] if all(c == configs[0] for c in configs) else {r.sequence: r.config for r in records},
    })
    return out


def cmd_eval(args) -> int:
    records, gts = _load_runs(args.runs)
    atomic_write(args.out, dumps(evaluate(records, gts, args.protocol)))
    return EXIT_OK


def ablate_rows(items, base: CliConfig, sets: list[dict[str, str]]) -> list[dict]:
    rows = []
    for assignment in sets:
        cfg = apply(base, assignment)
        resets = run_suite(cfg.tracker, items, "reset", reinit_delay=cfg.protocol.reinit_delay,
                           burn_in=cfg.protocol.burn_in)
        a, r = accuracy_robustness(resets)
        eao = eao_lite(resets)
        ope = run_suite(cfg.tracker, items, "ope")
        auc, _, _ = ope_curves(ope, [it.groundtruth for it in items])
        rows.append({"param": ";".join(assignment), "value": ";".join(assignment.values()),
                     "A": a, "R": r, "eao": eao, "auc": auc})
    for col in METRIC_COLUMNS:
        cum = sweep_cumulative([row[col] for row in rows])
        for row, c in zip(rows, cum):
            row["cum_" + col] = float(c)
    return rows


def cmd_ablate(args) -> int:
    cfg = _config(args)
    sets = parse_sweep(args.sweep)
    for s in sets:  # validate every set before any tracking
        apply(cfg, s)
    items = load_items(args.seq, cfg, args.seed)
    rows = ablate_rows(items, cfg, sets)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = CSV_HEADER + ["cum_" + c for c in METRIC_COLUMNS]
    w.writerow(cols)
    for row in rows:
        w.writerow([row["param"], row["value"]] + [_fmt(row[c]) for c in cols[2:]])
    atomic_write(args.out, buf.getvalue())
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    dirs = _sequence_dirs(args.seq)
    if len(dirs) < MIN_SEQUENCES:
        raise UsageError(f"calibration needs at least {MIN_SEQUENCES} sequences, got {len(dirs)}")
    items = load_items(dirs, cfg, args.seed)
    res = calibrate(items, cfg.tracker, step=args.step, objective=args.objective)
    out = res.to_dict()
    out.update({"tool": "dualtrack", "version": __version__, "sequences": [it.name for it in items],
                "config": flatten(cfg)})
    atomic_write(args.out, dumps(out))
    return EXIT_OK


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualtrack", description="Dual-modal tracker desk-scale toolkit.")
    ap.add_argument("--version", action="version", version=f"dualtrack {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--seed", type=int, help="override every seed in the config")

    p = sub.add_parser("simulate", help="generate synthetic sequence directories")
    common(p, "output sequence directory (parent directory when --count > 1)")
    p.add_argument("--count", type=int, default=1, help="number of sequences, seeds seed..seed+count-1")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", help="run the tracker over one sequence")
    common(p, "run record JSON path")
    p.add_argument("--seq", required=True, help="sequence directory")
    p.add_argument("--protocol", choices=("reset", "ope"), default="reset")
    p.add_argument("--dump-heatmaps", metavar="DIR", help="write the fused map of every tracked frame")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="compute metrics from run records")
    p.add_argument("runs", nargs="+", help="run record JSON files")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--protocol", choices=("reset", "ope"), default="reset")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep config values over a sequence set")
    common(p, "CSV path")
    p.add_argument("--seq", nargs="+", required=True, help="sequence directories or a parent directory")
    p.add_argument("--sweep", required=True, help="key=start:stop:step, key=v1|v2|..., or a grid file")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("calibrate", help="grid-search layer weights on a sequence set")
    common(p, "weights JSON path")
    p.add_argument("--seq", nargs="+", required=True, help="sequence directories or a parent directory")
    p.add_argument("--objective", choices=("eao", "loss"), default="eao")
    p.add_argument("--step", type=float, default=0.1, help="simplex grid step")
    p.set_defaults(func=cmd_calibrate)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="dualtrack: %(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except FormatError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
