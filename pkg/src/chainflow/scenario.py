"""Procedural driving scenarios, their featurizers, and JSON-lines persistence.

A scenario is a lane corridor (centerline polyline + half width), a handful of
disc obstacles, the ego start state and an expert trajectory produced by a
pure-pursuit tracker rolled through the bicycle model. Scene tokens and the
semantic context are recomputed from geometry, never stored.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import geometry
from .kinematics import (A_MAX, W_MAX, ControlInput, EgoState, Trajectory,
                         bicycle_step, rollout_controls, wrap_angle)


class ScenarioError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


class Maneuver(str, enum.Enum):
    STRAIGHT = "straight"
    LEFT_TURN = "left_turn"
    RIGHT_TURN = "right_turn"
    LANE_FOLLOW_CURVE = "lane_follow_curve"
    STOP_FOR_OBSTACLE = "stop_for_obstacle"
    OVERTAKE_STATIC = "overtake_static"


MANEUVERS = list(Maneuver)


@dataclass
class ScenarioConfig:
    T: int = 8
    dt: float = 0.5
    maneuver_probs: dict = field(default_factory=lambda: {
        "straight": 0.30, "left_turn": 0.15, "right_turn": 0.15,
        "lane_follow_curve": 0.20, "stop_for_obstacle": 0.10, "overtake_static": 0.10,
    })
    max_obstacles: int = 6
    moving_obstacles: bool = False
    half_width: tuple = (3.0, 4.0)
    a_max: float = A_MAX
    w_max: float = W_MAX
    max_retries: int = 20
    n_tok_obstacles: int = 6
    n_tok_segments: int = 12
    segment_spacing: float = 6.0
    d_tok: int = 16
    n_sem: int = 8
    d_sem: int = 32
    codebook_seed: int = 0

    @property
    def n_tok(self) -> int:
        return 1 + self.n_tok_obstacles + self.n_tok_segments


@dataclass(frozen=True)
class LaneCorridor:
    centerline: np.ndarray
    half_width: float

    def __post_init__(self):
        c = np.asarray(self.centerline, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 2 or len(c) < 2:
            raise ScenarioError(f"centerline must be [M>=2, 2], got {c.shape}")
        if not self.half_width > 0:
            raise ScenarioError("half_width must be positive")
        if (np.hypot(*np.diff(c, axis=0).T) <= 0).any():
            raise ScenarioError("consecutive centerline points must be distinct")
        object.__setattr__(self, "centerline", c)


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float]
    radius: float
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ScenarioError("obstacle radius must be positive")


@dataclass(eq=False)
class Scenario:
    id: str
    corridor: LaneCorridor
    obstacles: list[Obstacle]
    ego_init: EgoState
    expert: Trajectory
    maneuver: Maneuver
    seed: int
    scene_tokens: np.ndarray | None = None
    semantic_ctx: np.ndarray | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scenario):
            return NotImplemented
        return (to_record(self) == to_record(other)
                and np.array_equal(self.scene_tokens, other.scene_tokens)
                and np.array_equal(self.semantic_ctx, other.semantic_ctx))

    @property
    def obstacle_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        c = np.array([o.center for o in self.obstacles], dtype=np.float64).reshape(-1, 2)
        r = np.array([o.radius for o in self.obstacles], dtype=np.float64)
        v = np.array([o.velocity for o in self.obstacles], dtype=np.float64).reshape(-1, 2)
        return c, r, v


def obstacle_heavy(s: Scenario) -> bool:
    return len(s.obstacles) >= 3 or s.maneuver in (Maneuver.STOP_FOR_OBSTACLE,
                                                   Maneuver.OVERTAKE_STATIC)


# ------------------------------------------------------------------ geometry


def _integrate_path(pieces: Sequence[tuple[float, float]], start=(-10.0, 0.0),
                    ds: float = 2.0) -> np.ndarray:
    """Integrate (length, curvature) pieces into a polyline, ~``ds`` spacing."""
    x, y = start
    th = 0.0
    pts = [(x, y)]
    for length, kappa in pieces:
        n = max(1, int(round(length / ds)))
        h = length / n
        for _ in range(n):
            if kappa == 0.0:
                x += h * math.cos(th)
                y += h * math.sin(th)
            else:
                x += (math.sin(th + kappa * h) - math.sin(th)) / kappa
                y += (math.cos(th) - math.cos(th + kappa * h)) / kappa
            th += kappa * h
            pts.append((x, y))
    return np.array(pts)


def _lookahead(path: np.ndarray, cum: np.ndarray, pos: np.ndarray, dist: float) -> np.ndarray:
    _, s, _ = geometry.project_to_polyline(pos[None], path)
    return geometry.point_at_arclength(path, float(s[0]) + dist)[0]


def _pure_pursuit(ref: np.ndarray, ego: EgoState, accel: Sequence[float], T: int, dt: float,
                  a_max: float, w_max: float) -> list[ControlInput]:
    """Yaw-rate pure pursuit along ``ref`` with a precomputed accel profile."""
    cum = geometry.polyline_arclength(ref)
    s = ego
    w_prev = 0.0
    controls = []
    for t in range(T):
        ld = max(6.0, 1.2 * s.speed)
        target = _lookahead(ref, cum, np.array([s.x, s.y]), ld)
        alpha = wrap_angle(math.atan2(target[1] - s.y, target[0] - s.x) - s.heading)
        w = s.speed * 2.0 * math.sin(alpha) / ld
        w = min(max(w, w_prev - 0.8, -w_max), w_prev + 0.8, w_max)
        a = min(max(accel[t], -a_max), a_max)
        c = ControlInput(a, w)
        controls.append(c)
        s = bicycle_step(s, c, dt, a_max, w_max)
        w_prev = w
    return controls


def _speed_profile(v0: float, v_target: float, n: int, dt: float,
                   a_up: float = 2.0, a_down: float = 2.5, jerk: float = 4.0,
                   gain: float = 0.8) -> list[float]:
    """Jerk-limited accelerations tracking ``v_target`` (trapezoidal-ish ramps)."""
    out = []
    v, a = v0, 0.0
    for _ in range(n):
        a_des = min(max(gain * (v_target - v), -a_down), a_up)
        a = min(max(a_des, a - jerk * dt), a + jerk * dt)
        if v + a * dt < 0:
            a = -v / dt
        out.append(a)
        v = max(0.0, v + a * dt)
    return out


def _braking_profile(v0: float, n: int, dt: float, delay: int, decel: float,
                     jerk: float = 4.0) -> list[float]:
    out = []
    v, a = v0, 0.0
    for t in range(n):
        a_des = 0.0 if (t < delay or v <= 0) else -decel
        a = min(max(a_des, a - jerk * dt), a + jerk * dt)
        if v + a * dt < 0:
            a = -v / dt
        out.append(a)
        v = max(0.0, v + a * dt)
    return out


def _travel(v0: float, accel: Sequence[float], dt: float) -> float:
    v, d = v0, 0.0
    for a in accel:
        d += v * dt
        v = max(0.0, v + a * dt)
    return d


def expert_clearance(expert: Trajectory, ego: EgoState, obstacles: list[Obstacle]) -> float:
    pts, times = geometry.interpolate_motion(np.array([ego.x, ego.y]), expert.positions, expert.dt)
    c = np.array([o.center for o in obstacles]).reshape(-1, 2)
    r = np.array([o.radius for o in obstacles])
    v = np.array([o.velocity for o in obstacles]).reshape(-1, 2)
    return geometry.obstacle_clearance(pts, times, c, r, v)


def _attempt(rng: np.random.Generator, maneuver: Maneuver, cfg: ScenarioConfig):
    T, dt = cfg.T, cfg.dt
    hw = float(rng.uniform(*cfg.half_width))
    v0 = float(rng.uniform(5.0, 12.0))
    ego = EgoState(0.0, 0.0, 0.0, v0)
    ahead = 100.0
    obstacles: list[Obstacle] = []
    ref = None

    if maneuver in (Maneuver.LEFT_TURN, Maneuver.RIGHT_TURN):
        d0 = float(rng.uniform(4.0, 16.0))
        R = float(rng.uniform(12.0, 25.0))
        sign = 1.0 if maneuver is Maneuver.LEFT_TURN else -1.0
        arc = R * math.pi / 2
        pieces = [(10.0, 0.0), (d0, 0.0), (arc, sign / R), (max(10.0, ahead - d0 - arc), 0.0)]
        v_target = min(v0, math.sqrt(2.5 * R)) - float(rng.uniform(0.0, 1.5))
        accel = _speed_profile(v0, max(v_target, 3.0), T, dt)
    elif maneuver is Maneuver.LANE_FOLLOW_CURVE:
        d0 = float(rng.uniform(0.0, 10.0))
        kappa = float(rng.choice([-1, 1]) * rng.uniform(1 / 120, 1 / 45))
        pieces = [(10.0, 0.0), (d0, 0.0), (ahead - d0, kappa)]
        v_target = float(np.clip(v0 + rng.uniform(-3.0, 3.0), 3.0, 15.0))
        accel = _speed_profile(v0, v_target, T, dt)
    else:
        pieces = [(10.0 + ahead, 0.0)]
        if maneuver is Maneuver.STRAIGHT:
            dv = float(rng.choice([-1, 1]) * rng.uniform(2.0, 4.0))
            accel = _speed_profile(v0, float(np.clip(v0 + dv, 3.0, 15.0)), T, dt)
        elif maneuver is Maneuver.STOP_FOR_OBSTACLE:
            delay = int(rng.integers(0, 3))
            decel = float(rng.uniform(1.8, 3.0))
            long_profile = _braking_profile(v0, 4 * T, dt, delay, decel)
            accel = long_profile[:T]
            stop = _travel(v0, long_profile, dt)
            r = float(rng.uniform(0.5, 1.5))
            gap = float(rng.uniform(1.5, 3.0))
            x = stop + r + geometry.EGO_RADIUS + gap
            obstacles.append(Obstacle((x, float(rng.uniform(-0.5, 0.5))), r))
        else:  # overtake
            hw = float(rng.uniform(4.8, 5.6))
            D = float(rng.uniform(16.0, 32.0))
            r = float(rng.uniform(0.5, 1.0))
            side = float(rng.choice([-1, 1]))
            amp = side * float(rng.uniform(3.0, 3.4))
            jitter = -side * float(rng.uniform(0.0, 0.3))
            obstacles.append(Obstacle((D, jitter), r))
            xs = np.arange(-10.0, ahead + 0.1, 1.0)
            ramp = lambda u: np.clip(u, 0, 1) ** 2 * (3 - 2 * np.clip(u, 0, 1))  # noqa: E731
            off = amp * (ramp((xs - (D - 20.0)) / 12.0) - ramp((xs - (D + 6.0)) / 12.0))
            ref = np.column_stack([xs, off])
            v_target = float(np.clip(v0 + rng.uniform(-1.5, 1.0), 4.0, 13.0))
            accel = _speed_profile(v0, v_target, T, dt)

    centerline = _integrate_path(pieces)
    corridor = LaneCorridor(centerline, hw)
    controls = _pure_pursuit(centerline if ref is None else ref, ego, accel, T, dt,
                             cfg.a_max, cfg.w_max)
    expert = rollout_controls(ego, controls, dt, cfg.a_max, cfg.w_max)

    # distractor obstacles beside the path
    n_extra = int(rng.integers(0, cfg.max_obstacles - len(obstacles) + 1))
    if maneuver in (Maneuver.STOP_FOR_OBSTACLE, Maneuver.OVERTAKE_STATIC):
        n_extra = min(n_extra, 3)
    tries = 0
    while n_extra > 0 and tries < 60:
        tries += 1
        s_along = float(rng.uniform(6.0, 60.0))
        p, tan = geometry.point_at_arclength(centerline, s_along + 10.0)
        normal = np.array([-tan[1], tan[0]])
        r = float(rng.uniform(0.5, 1.5))
        lat = float(rng.choice([-1, 1]) * rng.uniform(1.5, hw + 4.0))
        c = p + lat * normal
        vel = (0.0, 0.0)
        if cfg.moving_obstacles and rng.uniform() < 0.5:
            sp = float(rng.uniform(-3.0, 3.0))
            vel = (float(sp * tan[0]), float(sp * tan[1]))
        cand = Obstacle((float(c[0]), float(c[1])), r, vel)
        if expert_clearance(expert, ego, [cand]) < 0.6:
            continue
        obstacles.append(cand)
        n_extra -= 1
    return corridor, obstacles, ego, expert


def validate_scenario(s: Scenario, a_max: float = A_MAX, w_max: float = W_MAX) -> list[str]:
    """Return a list of invariant violations (empty when valid)."""
    problems = []
    dist, _, _ = geometry.project_to_polyline(s.expert.positions, s.corridor.centerline)
    if (dist > s.corridor.half_width).any():
        problems.append(f"expert leaves corridor by {float(dist.max() - s.corridor.half_width):.3f} m")
    if s.obstacles and expert_clearance(s.expert, s.ego_init, s.obstacles) <= 0:
        problems.append("expert collides with an obstacle")
    arr = np.vstack([s.ego_init.as_array()[None], s.expert.array])
    dt = s.expert.dt
    acc = np.diff(arr[:, 3]) / dt
    yaw = wrap_angle(np.diff(arr[:, 2])) / dt
    if (np.abs(acc) > a_max + 1e-9).any() or (np.abs(yaw) > w_max + 1e-9).any():
        problems.append("expert controls exceed bounds")
    replay = rollout_controls(s.ego_init, [ControlInput(a, w) for a, w in zip(acc, yaw)], dt,
                              a_max, w_max)
    if not np.allclose(replay.array, s.expert.array, atol=1e-6, rtol=0):
        problems.append("expert is not reproducible from admissible controls")
    if not (np.isfinite(s.scene_tokens).all() and np.isfinite(s.semantic_ctx).all()):
        problems.append("non-finite features")
    return problems


def generate_scenario(seed: int, config: ScenarioConfig | None = None,
                      scenario_id: str | None = None,
                      maneuver: Maneuver | str | None = None) -> Scenario:
    cfg = config or ScenarioConfig()
    sid = scenario_id if scenario_id is not None else f"scn-{seed}"
    pick = np.random.default_rng([seed, 0])
    if maneuver is None:
        names = list(cfg.maneuver_probs)
        p = np.array([cfg.maneuver_probs[n] for n in names], dtype=np.float64)
        maneuver = Maneuver(names[int(pick.choice(len(names), p=p / p.sum()))])
    maneuver = Maneuver(maneuver)
    last = ""
    for attempt in range(cfg.max_retries):
        rng = np.random.default_rng([seed, attempt + 1])
        corridor, obstacles, ego, expert = _attempt(rng, maneuver, cfg)
        s = Scenario(sid, corridor, obstacles, ego, expert, maneuver, int(seed))
        featurize(s, cfg)
        problems = validate_scenario(s, cfg.a_max, cfg.w_max)
        if not problems:
            return s
        last = problems[0]
    raise ScenarioError(f"seed {seed}: no valid expert after {cfg.max_retries} attempts ({last})")


def dataset_seeds(master_seed: int, count: int) -> list[int]:
    ss = np.random.SeedSequence(master_seed)
    return [int(c.generate_state(1, np.uint32)[0]) for c in ss.spawn(count)]


def generate_dataset(master_seed: int, count: int, config: ScenarioConfig | None = None) -> list[Scenario]:
    return [generate_scenario(sd, config, scenario_id=f"{master_seed}-{i:05d}")
            for i, sd in enumerate(dataset_seeds(master_seed, count))]


# ------------------------------------------------------------------ featurizers

# scene token layout (D_tok = 16)
TOK_POS = slice(0, 2)
TOK_RADIUS = 2
TOK_VEL = slice(3, 5)
TOK_TANGENT = slice(5, 7)
TOK_SEG_LEN = 7
TOK_HALF_WIDTH = 8
TOK_IS_OBSTACLE = 9
TOK_IS_SEGMENT = 10
TOK_IS_EGO = 11
TOK_SPEED = 12
TOK_VALID = 13
TOK_END = slice(14, 16)


def _to_ego(ego: EgoState, pts) -> np.ndarray:
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    d = np.asarray(pts, dtype=np.float64) - np.array([ego.x, ego.y])
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def _rot_to_ego(ego: EgoState, vec) -> np.ndarray:
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    v = np.asarray(vec, dtype=np.float64)
    return np.stack([c * v[..., 0] + s * v[..., 1], -s * v[..., 0] + c * v[..., 1]], axis=-1)


def encode_scene_tokens(s: Scenario, config: ScenarioConfig | None = None) -> np.ndarray:
    """Ego-relative geometric tokens: [ego, obstacles (padded), centerline segments]."""
    cfg = config or ScenarioConfig()
    if cfg.d_tok < 16:
        raise ValueError("d_tok must be at least 16")
    tok = np.zeros((cfg.n_tok, cfg.d_tok))
    e = s.ego_init
    tok[0, TOK_IS_EGO] = 1.0
    tok[0, TOK_SPEED] = e.speed
    tok[0, TOK_VALID] = 1.0
    for i, o in enumerate(s.obstacles[: cfg.n_tok_obstacles]):
        row = tok[1 + i]
        row[TOK_POS] = _to_ego(e, o.center)
        row[TOK_RADIUS] = o.radius
        row[TOK_VEL] = _rot_to_ego(e, o.velocity)
        row[TOK_IS_OBSTACLE] = 1.0
        row[TOK_VALID] = 1.0
    cl = s.corridor.centerline
    _, s0, _ = geometry.project_to_polyline(np.array([[e.x, e.y]]), cl)
    base = 1 + cfg.n_tok_obstacles
    pts = [geometry.point_at_arclength(cl, float(s0[0]) + j * cfg.segment_spacing)[0]
           for j in range(cfg.n_tok_segments + 1)]
    pts = _to_ego(e, np.array(pts))
    for j in range(cfg.n_tok_segments):
        d = pts[j + 1] - pts[j]
        L = math.hypot(d[0], d[1])
        if L < 1e-9:
            continue
        row = tok[base + j]
        row[TOK_POS] = pts[j]
        row[TOK_TANGENT] = d / L
        row[TOK_SEG_LEN] = L
        row[TOK_HALF_WIDTH] = s.corridor.half_width
        row[TOK_IS_SEGMENT] = 1.0
        row[TOK_VALID] = 1.0
        row[TOK_END] = pts[j + 1]
    return tok


def token_mask(tokens: np.ndarray) -> np.ndarray:
    return tokens[..., TOK_VALID] > 0


# semantic slots
SEM_MANEUVER, SEM_LAYOUT, SEM_SPEED, SEM_GOAL = 0, 1, 2, 3
ROUTE_LOOKAHEADS = (10.0, 20.0, 40.0, 60.0)


def layout_class(s: Scenario) -> int:
    """0 none near the lane, 1 beside the lane, 2 blocking within 30 m, 3 blocking farther."""
    if not s.obstacles:
        return 0
    c, r, _ = s.obstacle_arrays
    _, along, lat = geometry.project_to_polyline(c, s.corridor.centerline)
    _, s0, _ = geometry.project_to_polyline(np.array([[s.ego_init.x, s.ego_init.y]]),
                                            s.corridor.centerline)
    ahead = along - s0[0]
    near_lane = (np.abs(lat) - r < s.corridor.half_width + 1.0) & (ahead > 0) & (ahead < 70)
    blocking = near_lane & (np.abs(lat) - r < 1.5)
    if blocking.any():
        return 2 if ahead[blocking].min() < 30.0 else 3
    return 1 if near_lane.any() else 0


def route_descriptor(s: Scenario) -> list[int]:
    """Centerline heading change at fixed look-aheads, in 15-degree bins (-6..6)."""
    cl = s.corridor.centerline
    _, s0, _ = geometry.project_to_polyline(np.array([[s.ego_init.x, s.ego_init.y]]), cl)
    out = []
    for d in ROUTE_LOOKAHEADS:
        _, tan = geometry.point_at_arclength(cl, float(s0[0]) + d)
        dh = wrap_angle(math.atan2(tan[1], tan[0]) - s.ego_init.heading)
        out.append(int(np.clip(round(math.degrees(dh) / 15.0), -6, 6)))
    return out


def semantic_attributes(s: Scenario) -> list[int]:
    v = s.ego_init.speed
    speed_regime = 0 if v < 6.0 else (1 if v < 9.0 else 2)
    route = route_descriptor(s)
    goal = 1 if route[-1] >= 2 else (2 if route[-1] <= -2 else 0)
    return [MANEUVERS.index(s.maneuver), layout_class(s), speed_regime, goal] + route


def codebook_vector(slot: int, value: int, dim: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, slot, value + 64])
    return rng.standard_normal(dim) / math.sqrt(dim)


def synth_semantic_ctx(s: Scenario, config: ScenarioConfig | None = None) -> np.ndarray:
    """Attribute-level context: one codebook row per discrete scene attribute."""
    cfg = config or ScenarioConfig()
    attrs = semantic_attributes(s)
    if len(attrs) > cfg.n_sem:
        attrs = attrs[: cfg.n_sem]
    ctx = np.zeros((cfg.n_sem, cfg.d_sem))
    for slot, val in enumerate(attrs):
        ctx[slot] = codebook_vector(slot, val, cfg.d_sem, cfg.codebook_seed)
    return ctx


def featurize(s: Scenario, config: ScenarioConfig | None = None) -> Scenario:
    s.scene_tokens = encode_scene_tokens(s, config)
    s.semantic_ctx = synth_semantic_ctx(s, config)
    return s


# ------------------------------------------------------------------ persistence

RECORD_VERSION = 1
FILE_FORMAT_VERSION = 1


def to_record(s: Scenario) -> dict:
    e = s.ego_init
    return {
        "version": RECORD_VERSION,
        "id": s.id,
        "seed": s.seed,
        "maneuver": s.maneuver.value,
        "corridor": {"centerline": s.corridor.centerline.tolist(),
                     "half_width": s.corridor.half_width},
        "obstacles": [{"center": list(o.center), "radius": o.radius,
                       "velocity": list(o.velocity)} for o in s.obstacles],
        "ego_init": {"x": e.x, "y": e.y, "heading": e.heading, "speed": e.speed},
        "expert": {"states": s.expert.array.tolist(), "dt": s.expert.dt},
    }


def from_record(rec: dict, config: ScenarioConfig | None = None) -> Scenario:
    if rec.get("version") != RECORD_VERSION:
        raise DatasetError(f"unsupported record version {rec.get('version')}")
    e = rec["ego_init"]
    s = Scenario(
        id=rec["id"],
        corridor=LaneCorridor(np.array(rec["corridor"]["centerline"], dtype=np.float64),
                              float(rec["corridor"]["half_width"])),
        obstacles=[Obstacle(tuple(o["center"]), float(o["radius"]), tuple(o["velocity"]))
                   for o in rec["obstacles"]],
        ego_init=EgoState(e["x"], e["y"], e["heading"], e["speed"]),
        expert=Trajectory(np.array(rec["expert"]["states"], dtype=np.float64),
                          float(rec["expert"]["dt"])),
        maneuver=Maneuver(rec["maneuver"]),
        seed=int(rec["seed"]),
    )
    return featurize(s, config)


def save_dataset(scenarios: Sequence[Scenario], path, config: ScenarioConfig | None = None) -> None:
    cfg = config or ScenarioConfig()
    lines = [json.dumps({"format_version": FILE_FORMAT_VERSION, "T": cfg.T, "dt": cfg.dt})]
    lines += [json.dumps(to_record(s)) for s in scenarios]
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path, config: ScenarioConfig | None = None) -> list[Scenario]:
    text = Path(path).read_text()
    if not text.strip():
        return []
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    out = []
    for lineno, line in enumerate(lines, start=1):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: line {lineno}: malformed record ({exc.msg})") from exc
        if lineno == 1:
            if obj.get("format_version") != FILE_FORMAT_VERSION:
                raise DatasetError(f"{path}: line 1: unsupported format_version "
                                   f"{obj.get('format_version')}")
            if config is not None and (obj.get("T") != config.T or obj.get("dt") != config.dt):
                raise DatasetError(f"{path}: line 1: dataset T/dt {obj.get('T')}/{obj.get('dt')} "
                                   f"do not match config {config.T}/{config.dt}")
            continue
        try:
            out.append(from_record(obj, config))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: line {lineno}: malformed record ({exc})") from exc
    return out
