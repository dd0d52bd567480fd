"""Planning inference and dataset-level metric reports."""

from __future__ import annotations

import csv
import io
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensorcore as tc
from .chain import rollout_batch
from .kinematics import Trajectory
from .metrics import DEFAULT, MetricConfig, score_trajectory
from .model import Planner, load_planner
from .scenario import Scenario, obstacle_heavy
from .scorer import candidate_features, scorer_forward, select_best, to_score_vectors

ARMS = ("full", "ar-only", "cond-semantic", "cond-scene")
METRICS = ("pdms", "nc", "dac", "ep", "ttc", "comfort")
ROW_FIELDS = ["scenario_id", "arm", "maneuver", "obstacle_heavy", "selected", *METRICS]


@dataclass
class PlanResult:
    proposals: list[Trajectory]
    candidates: list[Trajectory]  # refined (or the proposals themselves when not refining)
    scores: list
    selected: int

    @property
    def trajectory(self) -> Trajectory:
        return self.candidates[self.selected]


def noise_rng(seed: int, scenario_id: str, k: int) -> np.random.Generator:
    """Per (scenario, mode) stream, independent of batching and order."""
    return np.random.default_rng([seed, zlib.crc32(scenario_id.encode()), k])


def _conditioning(s: Scenario, planner: Planner) -> np.ndarray:
    if planner.config.flow.conditioning_source == "semantic_ctx":
        return s.semantic_ctx
    return s.scene_tokens


def plan_batch(scenarios: Sequence[Scenario], planner: Planner, refine: bool = True,
               n_steps: int | None = None, seed: int = 0) -> list[PlanResult]:
    """Chain rollout, optional DDIM refinement of every proposal, scorer selection."""
    from .flow import refine_batch

    if not scenarios:
        return []
    pc = planner.config
    K, T, dt = pc.chain.K, pc.chain.T, pc.chain.dt
    n_steps = n_steps or pc.flow.n_infer_steps
    tokens = np.stack([s.scene_tokens for s in scenarios])
    ego = np.stack([s.ego_init.as_array() for s in scenarios])
    B = len(scenarios)
    with tc.no_grad():
        states, _, _ = rollout_batch(tokens, ego, planner.params, pc.chain)
        props = states.data[..., :2]
        if refine:
            z = np.stack([noise_rng(seed, s.id, k).standard_normal((T, 2))
                          for s in scenarios for k in range(K)])
            cond = np.stack([_conditioning(s, planner) for s in scenarios])
            ref = refine_batch(props.reshape(B * K, T, 2), np.repeat(ego, K, axis=0),
                               np.repeat(cond, K, axis=0), z, planner.params, pc.flow,
                               planner.schedule, n_steps).data.reshape(B, K, T, 2)
        else:
            ref = props
        feats, pairs = zip(*(candidate_features(ref[b], s, pc.scorer)
                             for b, s in enumerate(scenarios)))
        raw = scorer_forward(np.stack(feats), np.stack(pairs), tokens, planner.params,
                             pc.scorer).data
    out = []
    for b, s in enumerate(scenarios):
        P = [Trajectory(states.data[b, k].copy(), dt) for k in range(K)]
        C = P if not refine else [Trajectory.from_positions(ref[b, k], s.ego_init, dt)
                                  for k in range(K)]
        sv = to_score_vectors(raw[b])
        out.append(PlanResult(P, C, sv, select_best(sv)))
    return out


def plan_scenario(scenario: Scenario, planner: Planner, refine: bool = True,
                  n_steps: int | None = None, seed: int = 0) -> PlanResult:
    return plan_batch([scenario], planner, refine, n_steps, seed)[0]


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)

    def arms(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r["arm"] not in seen:
                seen.append(r["arm"])
        return seen

    def select(self, arm: str, subset: Callable[[dict], bool] | None = None) -> list[dict]:
        return [r for r in self.rows if r["arm"] == arm and (subset is None or subset(r))]

    def mean(self, arm: str, metric: str = "pdms", subset=None) -> float:
        rows = self.select(arm, subset)
        if not rows:
            return float("nan")
        return float(np.mean([r[metric] for r in rows]))

    def aggregates(self, arm: str, subset=None) -> dict[str, float]:
        return {m: self.mean(arm, m, subset) for m in METRICS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r[k]) for k in ROW_FIELDS})
        for arm in self.arms():
            agg = self.aggregates(arm)
            w.writerow({"scenario_id": "MEAN", "arm": arm, "maneuver": "", "obstacle_heavy": "",
                        "selected": "", **{m: _fmt(agg[m]) for m in METRICS}})
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def summary(self) -> str:
        """Table-style summary, means x100."""
        head = f"{'arm':<14}{'PDMS':>8}{'NC':>8}{'DAC':>8}{'EP':>8}{'TTC':>8}{'Comf.':>8}"
        lines = [head, "-" * len(head)]
        for arm in self.arms():
            a = self.aggregates(arm)
            lines.append(f"{arm:<14}" + "".join(f"{100 * a[m]:8.2f}" for m in METRICS))
        return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def evaluate_trajectories(dataset: Sequence[Scenario], plan_fn: Callable[[Scenario], Trajectory],
                          arm: str = "custom", metric_config: MetricConfig = DEFAULT) -> MetricReport:
    """Score any planner given as a scenario -> trajectory function."""
    report = MetricReport()
    for s in dataset:
        _add_row(report, s, arm, plan_fn(s), -1, metric_config)
    return report


def _add_row(report, s: Scenario, arm: str, traj, selected: int, cfg: MetricConfig) -> None:
    sub = score_trajectory(traj, s, cfg)
    report.rows.append({"scenario_id": s.id, "arm": arm, "maneuver": s.maneuver.value,
                        "obstacle_heavy": int(obstacle_heavy(s)), "selected": selected,
                        "pdms": sub.pdms, **sub.as_dict()})


def _resolve(p) -> Planner:
    if isinstance(p, Planner):
        return p
    path = Path(p)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_planner(path)[0]


def arm_planners(checkpoints: Mapping[str, object], arms: Sequence[str]) -> dict[str, Planner]:
    """Map each arm to a planner.

    ``checkpoints`` holds "main" and optionally "semantic_ctx" / "scene_tokens"
    (planners trained with that conditioning source). A conditioning arm falls
    back to "main" when the main planner already uses that source.
    """
    cache: dict[str, Planner] = {}

    def get(key):
        if key not in cache:
            if key not in checkpoints:
                raise KeyError(f"no checkpoint given for {key!r}")
            cache[key] = _resolve(checkpoints[key])
        return cache[key]

    out = {}
    for arm in arms:
        if arm not in ARMS:
            raise ValueError(f"unknown arm {arm!r}; expected one of {ARMS}")
        if arm in ("full", "ar-only"):
            out[arm] = get("main")
            continue
        src = "semantic_ctx" if arm == "cond-semantic" else "scene_tokens"
        if src in checkpoints:
            out[arm] = get(src)
        else:
            main = get("main")
            if main.config.flow.conditioning_source != src:
                raise KeyError(f"arm {arm!r} needs a checkpoint trained with {src} conditioning")
            out[arm] = main
    return out


def evaluate_pipeline(dataset: Sequence[Scenario], checkpoints, arms: Sequence[str] = ("full",),
                      n_steps: int | None = None, seed: int = 0, batch_size: int = 16,
                      metric_config: MetricConfig = DEFAULT) -> MetricReport:
    """Plan every scenario under each arm and score the selected trajectory.

    ``checkpoints`` is a path, a Planner, or a mapping (see ``arm_planners``).
    """
    if not isinstance(checkpoints, Mapping):
        checkpoints = {"main": checkpoints}
    planners = arm_planners(checkpoints, arms)
    report = MetricReport()
    for arm in arms:
        planner = planners[arm]
        for i in range(0, len(dataset), batch_size):
            chunk = dataset[i:i + batch_size]
            for s, r in zip(chunk, plan_batch(chunk, planner, arm != "ar-only", n_steps, seed)):
                _add_row(report, s, arm, r.trajectory, r.selected, metric_config)
    return report


def sweep_steps(dataset: Sequence[Scenario], checkpoint, steps: Sequence[int], seed: int = 0,
                metric_config: MetricConfig = DEFAULT) -> list[dict]:
    """Refined-arm aggregates for each DDIM step count."""
    planner = _resolve(checkpoint)
    rows = []
    for n in steps:
        rep = evaluate_pipeline(dataset, planner, ("full",), n_steps=n, seed=seed,
                                metric_config=metric_config)
        rows.append({"steps": n, **rep.aggregates("full")})
    return rows
