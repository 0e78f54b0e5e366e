"""Seeded simulator suites and helpers that run tracker configs over them."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

from .evaluation import BURN_IN, REINIT_DELAY, RunRecord, run_ope, run_reset_protocol
from .features import FeatureProviderConfig, synth_features
from .sim import SimConfig, gen_sequence
from .tracker import DualModalTracker, Frame, TrackerConfig

SUITE_SIM = SimConfig(length=120, distractors=2, occlusion_prob=0.1)


@dataclass
class SuiteItem:
    name: str
    frames: list
    groundtruth: list


def make_suite(count: int, base_seed: int = 0, sim: SimConfig = SUITE_SIM,
               features: FeatureProviderConfig = FeatureProviderConfig()) -> list[SuiteItem]:
    """``count`` oracle sequences with seeds ``base_seed, base_seed + 1, ...``."""
    items = []
    for k in range(count):
        seed = base_seed + k
        seq = gen_sequence(replace(sim, seed=seed))
        fcfg = replace(features, seed=seed)
        frames = [Frame(synth_features(sc, fcfg), sc) for sc in seq.scenes]
        items.append(SuiteItem(f"sim-{seed:04d}", frames, list(seq.groundtruth)))
    return items


class _Factory:
    def __init__(self, cfg: TrackerConfig):
        self.cfg = cfg

    def __call__(self):
        return DualModalTracker(self.cfg)


def run_item(cfg: TrackerConfig, item: SuiteItem, protocol: str = "reset",
             reinit_delay: int = REINIT_DELAY, burn_in: int = BURN_IN) -> RunRecord:
    if protocol == "reset":
        return run_reset_protocol(_Factory(cfg), item.frames, item.groundtruth, reinit_delay, burn_in,
                                  sequence=item.name)
    if protocol == "ope":
        return run_ope(_Factory(cfg), item.frames, item.groundtruth, sequence=item.name)
    raise ValueError(f"unknown protocol {protocol!r}")


def _run_star(args):
    return run_item(*args)


def worker_count() -> int:
    try:
        n = int(os.environ.get("DUALTRACK_THREADS", "1"))
    except ValueError:
        raise ValueError("DUALTRACK_THREADS must be an integer") from None
    return max(1, n)


def run_suite(cfg: TrackerConfig, suite: list[SuiteItem], protocol: str = "reset",
              workers: int | None = None, reinit_delay: int = REINIT_DELAY,
              burn_in: int = BURN_IN) -> list[RunRecord]:
    """Run one config over a suite; results keep the suite order whatever the worker count."""
    workers = worker_count() if workers is None else workers
    jobs = [(cfg, item, protocol, reinit_delay, burn_in) for item in suite]
    if workers <= 1 or len(jobs) <= 1:
        return [_run_star(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_star, jobs))
