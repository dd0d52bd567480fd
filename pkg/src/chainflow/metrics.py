"""Mini-PDMS metric suite: NC, DAC, EP, TTC, Comfort and their aggregate."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import geometry
from .kinematics import Trajectory, wrap_angle
from .scenario import Scenario


@dataclass(frozen=True)
class MetricConfig:
    ego_radius: float = geometry.EGO_RADIUS
    nc_substeps: int = 10
    ttc_horizon: float = 3.0
    max_accel: float = 4.0
    max_jerk: float = 8.0
    max_yaw_accel: float = 2.0
    w_ttc: float = 5.0
    w_ep: float = 5.0
    w_comfort: float = 2.0


DEFAULT = MetricConfig()


@dataclass(frozen=True)
class SubScores:
    nc: float
    dac: float
    ep: float
    ttc: float
    comfort: float

    @property
    def pdms(self) -> float:
        return mini_pdms(self)

    def as_dict(self) -> dict:
        return {**asdict(self), "pdms": self.pdms}


def _xy(traj) -> np.ndarray:
    return traj.positions if isinstance(traj, Trajectory) else np.asarray(traj)[:, :2]


def no_collision(traj, scenario: Scenario, cfg: MetricConfig = DEFAULT,
                 substeps: int | None = None) -> float:
    """1 if the ego disc never touches an obstacle along the interpolated motion."""
    if not scenario.obstacles:
        return 1.0
    e = scenario.ego_init
    dt = scenario.expert.dt
    pts, times = geometry.interpolate_motion(np.array([e.x, e.y]), _xy(traj), dt,
                                             substeps or cfg.nc_substeps)
    c, r, v = scenario.obstacle_arrays
    return 1.0 if geometry.obstacle_clearance(pts, times, c, r, v, cfg.ego_radius) > 0 else 0.0


def drivable_compliance(traj, scenario: Scenario, cfg: MetricConfig = DEFAULT) -> float:
    dist, _, _ = geometry.project_to_polyline(_xy(traj), scenario.corridor.centerline)
    return 1.0 if (dist <= scenario.corridor.half_width).all() else 0.0


def _progress(xy: np.ndarray, scenario: Scenario) -> float:
    e = scenario.ego_init
    pts = np.vstack([[e.x, e.y], xy[-1:]])
    _, s, _ = geometry.project_to_polyline(pts, scenario.corridor.centerline)
    return float(s[1] - s[0])


def ego_progress(traj, scenario: Scenario, cfg: MetricConfig = DEFAULT) -> float:
    """Centerline arc-length progress relative to the expert, clipped to [0, 1]."""
    ref = _progress(scenario.expert.positions, scenario)
    if ref < 1e-6:
        return 1.0
    return float(np.clip(_progress(_xy(traj), scenario) / ref, 0.0, 1.0))


def _first_contact(rel: np.ndarray, vel: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Earliest tau >= 0 with |rel + vel*tau| <= R, inf if none (vectorized)."""
    a = (vel * vel).sum(-1)
    b = 2 * (rel * vel).sum(-1)
    c = (rel * rel).sum(-1) - R * R
    tau = np.full(c.shape, np.inf)
    inside = c <= 0
    tau[inside] = 0.0
    disc = b * b - 4 * a * c
    ok = (~inside) & (a > 1e-12) & (disc >= 0)
    root = (-b[ok] - np.sqrt(disc[ok])) / (2 * a[ok])
    tau[ok] = np.where(root >= 0, root, np.inf)
    return tau


def min_time_to_collision(traj, scenario: Scenario, cfg: MetricConfig = DEFAULT) -> float:
    if not scenario.obstacles:
        return np.inf
    e = scenario.ego_init
    dt = scenario.expert.dt
    pts = np.vstack([[e.x, e.y], _xy(traj)])
    ego_vel = np.diff(pts, axis=0) / dt
    times = np.arange(1, len(pts)) * dt
    c, r, v = scenario.obstacle_arrays
    obs = c[None] + times[:, None, None] * v[None]
    rel = obs - pts[1:, None, :]
    vel = v[None] - ego_vel[:, None, :]
    tau = _first_contact(rel, vel, np.broadcast_to(r + cfg.ego_radius, rel.shape[:2]))
    return float(tau.min())


def time_to_collision(traj, scenario: Scenario, cfg: MetricConfig = DEFAULT) -> float:
    """1 when no contact within the horizon under constant velocities, linear to 0 at 0 s."""
    tau = min_time_to_collision(traj, scenario, cfg)
    return float(min(1.0, tau / cfg.ttc_horizon))


def comfort(traj, scenario_or_start, cfg: MetricConfig = DEFAULT, dt: float | None = None) -> float:
    """1 if finite-difference accel, jerk and yaw acceleration stay within limits."""
    if isinstance(scenario_or_start, Scenario):
        e = scenario_or_start.ego_init
        dt = dt or scenario_or_start.expert.dt
        start = np.array([e.x, e.y])
        h0 = e.heading
    else:
        start = np.asarray(scenario_or_start, dtype=np.float64)[:2]
        h0 = float(scenario_or_start[2]) if len(scenario_or_start) > 2 else 0.0
        dt = dt or (traj.dt if isinstance(traj, Trajectory) else 0.5)
    pts = np.vstack([start, _xy(traj)])
    d = np.diff(pts, axis=0)
    dist = np.hypot(d[:, 0], d[:, 1])
    speed = dist / dt
    head = np.empty(len(d))
    prev = h0
    for i in range(len(d)):
        if dist[i] > 1e-3:
            prev = math.atan2(d[i, 1], d[i, 0])
        head[i] = prev
    acc = np.diff(speed) / dt
    jerk = np.diff(acc) / dt
    yaw_rate = wrap_angle(np.diff(head)) / dt if len(head) > 1 else np.zeros(0)
    yaw_acc = np.diff(yaw_rate) / dt
    ok = ((np.abs(acc) <= cfg.max_accel).all() and (np.abs(jerk) <= cfg.max_jerk).all()
          and (np.abs(yaw_acc) <= cfg.max_yaw_accel).all())
    return 1.0 if ok else 0.0


def mini_pdms(sub: SubScores, cfg: MetricConfig = DEFAULT) -> float:
    w = cfg.w_ttc + cfg.w_ep + cfg.w_comfort
    return sub.nc * sub.dac * (cfg.w_ttc * sub.ttc + cfg.w_ep * sub.ep
                               + cfg.w_comfort * sub.comfort) / w


def score_trajectory(traj, scenario: Scenario, cfg: MetricConfig = DEFAULT) -> SubScores:
    return SubScores(
        nc=no_collision(traj, scenario, cfg),
        dac=drivable_compliance(traj, scenario, cfg),
        ep=ego_progress(traj, scenario, cfg),
        ttc=time_to_collision(traj, scenario, cfg),
        comfort=comfort(traj, scenario, cfg),
    )
