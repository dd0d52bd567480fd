"""Desk-scale training runs with an on-disk cache keyed by everything that affects the weights."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

from .flow import FlowConfig
from .model import PlannerConfig, build_planner, load_planner, with_flow
from .scenario import ScenarioConfig, generate_dataset
from .training import TrainConfig, train_stage

log = logging.getLogger(__name__)

TRAIN_SEED = 1000
TEST_SEED = 9000
RETRAIN_ENV = "CHAINFLOW_RETRAIN"


@dataclass(frozen=True)
class DeskRun:
    space: str = "residual"
    cond: str = "semantic_ctx"
    seed: int = 0  # Stage II seed; Stage I always uses seed 0
    epochs1: int = 25
    epochs2: int = 40
    n_train: int = 500


def train_set(n: int = 500):
    return generate_dataset(TRAIN_SEED, n, ScenarioConfig())


def test_set(n: int = 100):
    return generate_dataset(TEST_SEED, n, ScenarioConfig())


# modules whose code changes the trained weights
_WEIGHT_MODULES = ("tensorcore", "kinematics", "geometry", "scenario", "chain", "flow", "scorer",
                   "metrics", "training", "model", "checkpoint")


def _source_digest() -> str:
    h = hashlib.sha256()
    for m in _WEIGHT_MODULES:
        h.update((Path(__file__).parent / f"{m}.py").read_bytes())
    return h.hexdigest()


def _key(payload: dict) -> str:
    blob = json.dumps({**payload, "src": _source_digest()}, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _cached(d: Path) -> dict | None:
    meta = d / "meta.json"
    if meta.exists() and not os.environ.get(RETRAIN_ENV):
        return json.loads(meta.read_text())
    return None


def _finish(d: Path, info: dict) -> dict:
    (d / "meta.json").write_text(json.dumps(info, indent=1) + "\n")
    return info


def stage1(cache, run: DeskRun = DeskRun()) -> dict:
    """Train (or reuse) the shared Stage I planner. Returns meta with ``ckpt`` and ``wall_time``."""
    tc = TrainConfig(seed=0)
    payload = {"stage": 1, "n_train": run.n_train, "epochs": run.epochs1,
               "train": dataclasses.asdict(tc), "planner": PlannerConfig().to_dict()}
    d = Path(cache) / f"stage1-{_key(payload)}"
    hit = _cached(d)
    if hit:
        return hit
    d.mkdir(parents=True, exist_ok=True)
    (d / "train_log.csv").unlink(missing_ok=True)
    planner = build_planner(PlannerConfig(), 0)
    t0 = time.perf_counter()
    train_stage(1, train_set(run.n_train), planner, tc, d, epochs=run.epochs1)
    return _finish(d, {"ckpt": str(d / "stage1.ckpt"), "wall_time": time.perf_counter() - t0,
                       **payload})


def stage2(cache, run: DeskRun) -> dict:
    s1 = stage1(cache, run)
    tc = TrainConfig(seed=run.seed)
    flow = FlowConfig(space=run.space, conditioning_source=run.cond)
    payload = {"stage": 2, "stage1": s1["ckpt"], "run": dataclasses.asdict(run),
               "train": dataclasses.asdict(tc), "flow": dataclasses.asdict(flow)}
    d = Path(cache) / f"stage2-{run.space}-{run.cond}-s{run.seed}-{_key(payload)}"
    hit = _cached(d)
    if hit:
        return hit
    d.mkdir(parents=True, exist_ok=True)
    (d / "train_log.csv").unlink(missing_ok=True)
    planner = with_flow(load_planner(s1["ckpt"])[0], flow, run.seed)
    t0 = time.perf_counter()
    train_stage(2, train_set(run.n_train), planner, tc, d, epochs=run.epochs2)
    return _finish(d, {"ckpt": str(d / "stage2.ckpt"), "wall_time": time.perf_counter() - t0,
                       **payload})


# Runs the acceptance suite needs. Conditioning arms share a smaller, equal budget.
COND_EPOCHS = 12
ACCEPTANCE_RUNS = [DeskRun(space="residual"), DeskRun(space="trajectory")] + [
    DeskRun(cond=c, seed=s, epochs2=COND_EPOCHS)
    for s in (0, 1, 2) for c in ("semantic_ctx", "scene_tokens")]
