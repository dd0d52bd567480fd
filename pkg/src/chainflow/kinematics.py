"""Ego state, yaw-rate bicycle transition and displacement metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

A_MAX = 4.0
W_MAX = 1.0


class KinematicsError(ValueError):
    pass


def wrap_angle(a):
    """Wrap angles (scalar or array) into (-pi, pi]."""
    arr = np.asarray(a, dtype=np.float64)
    w = arr - 2 * np.pi * np.ceil((arr - np.pi) / (2 * np.pi))
    w = np.where(w > np.pi, w - 2 * np.pi, w)
    w = np.where(w <= -np.pi, w + 2 * np.pi, w)
    return float(w) if np.ndim(a) == 0 else w


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    heading: float
    speed: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.speed], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> EgoState:
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class ControlInput:
    accel: float
    yaw_rate: float

    def clamped(self, a_max: float = A_MAX, w_max: float = W_MAX) -> ControlInput:
        return ControlInput(min(max(self.accel, -a_max), a_max),
                            min(max(self.yaw_rate, -w_max), w_max))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """T states stored as a [T, 4] array of (x, y, heading, speed)."""

    array: np.ndarray
    dt: float

    def __post_init__(self):
        arr = np.asarray(self.array, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 4 or arr.shape[0] < 1:
            raise KinematicsError(f"trajectory array must be [T, 4], got {arr.shape}")
        if not self.dt > 0:
            raise KinematicsError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "array", arr)

    def __len__(self) -> int:
        return self.array.shape[0]

    def __eq__(self, other) -> bool:
        return (isinstance(other, Trajectory) and self.dt == other.dt
                and np.array_equal(self.array, other.array))

    @property
    def states(self) -> list[EgoState]:
        return [EgoState.from_array(r) for r in self.array]

    def __iter__(self) -> Iterator[EgoState]:
        return iter(self.states)

    @property
    def positions(self) -> np.ndarray:
        return self.array[:, :2]

    @classmethod
    def from_states(cls, states: Sequence[EgoState], dt: float) -> Trajectory:
        return cls(np.array([s.as_array() for s in states]), dt)

    @classmethod
    def from_positions(cls, xy: np.ndarray, start: EgoState, dt: float) -> Trajectory:
        """Rebuild heading and speed from consecutive positions.

        Heading/speed of state i come from the displacement into the next
        waypoint (the last state reuses the previous one), matching the
        forward-Euler convention that position i+1 depends on state i.
        """
        xy = np.asarray(xy, dtype=np.float64)
        pts = np.vstack([[start.x, start.y], xy])
        d = np.diff(pts, axis=0)
        dist = np.hypot(d[:, 0], d[:, 1])
        head = np.empty(len(xy))
        prev = start.heading
        for i in range(len(d)):
            if dist[i] > 1e-6:
                prev = math.atan2(d[i, 1], d[i, 0])
            head[i] = prev
        # displacement into waypoint i was produced by state i-1
        out_head = np.empty(len(xy))
        out_speed = np.empty(len(xy))
        out_head[:-1] = head[1:]
        out_speed[:-1] = dist[1:] / dt
        if len(xy) > 1:
            out_head[-1] = out_head[-2]
            out_speed[-1] = out_speed[-2]
        else:
            out_head[-1] = head[0]
            out_speed[-1] = dist[0] / dt
        return cls(np.column_stack([xy, wrap_angle(out_head), out_speed]), dt)


def _check_finite(*vals: float) -> None:
    if not all(math.isfinite(v) for v in vals):
        raise KinematicsError(f"non-finite kinematic input {vals}")


def bicycle_step(state: EgoState, ctrl: ControlInput, dt: float,
                 a_max: float = A_MAX, w_max: float = W_MAX) -> EgoState:
    """One forward-Euler step of the yaw-rate bicycle model.

    Position advances with the pre-step speed and heading; controls are
    clamped to the admissible box first.
    """
    _check_finite(state.x, state.y, state.heading, state.speed, ctrl.accel, ctrl.yaw_rate, dt)
    if not dt > 0:
        raise KinematicsError(f"dt must be positive, got {dt}")
    c = ctrl.clamped(a_max, w_max)
    x = state.x + state.speed * math.cos(state.heading) * dt
    y = state.y + state.speed * math.sin(state.heading) * dt
    th = wrap_angle(state.heading + c.yaw_rate * dt)
    v = max(0.0, state.speed + c.accel * dt)
    return EgoState(x, y, th, v)


def rollout_controls(start: EgoState, controls: Sequence[ControlInput], dt: float,
                     a_max: float = A_MAX, w_max: float = W_MAX) -> Trajectory:
    if len(controls) == 0:
        raise KinematicsError("rollout_controls needs at least one control")
    states = []
    s = start
    for c in controls:
        s = bicycle_step(s, c, dt, a_max, w_max)
        states.append(s)
    return Trajectory.from_states(states, dt)


def rollout_array(start: np.ndarray, controls: np.ndarray, dt: float,
                  a_max: float = A_MAX, w_max: float = W_MAX) -> np.ndarray:
    """Vectorized rollout: start [..., 4], controls [..., T, 2] -> states [..., T, 4].

    Same arithmetic (and operation order) as ``bicycle_step``.
    """
    s = np.array(start, dtype=np.float64)
    u = np.asarray(controls, dtype=np.float64)
    if not (np.isfinite(s).all() and np.isfinite(u).all()):
        raise KinematicsError("non-finite kinematic input")
    a = np.clip(u[..., 0], -a_max, a_max)
    w = np.clip(u[..., 1], -w_max, w_max)
    out = np.empty(u.shape[:-1] + (4,))
    x, y, th, v = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
    for t in range(u.shape[-2]):
        x = x + v * np.cos(th) * dt
        y = y + v * np.sin(th) * dt
        th = wrap_angle(th + w[..., t] * dt)
        v = np.maximum(0.0, v + a[..., t] * dt)
        out[..., t, 0], out[..., t, 1], out[..., t, 2], out[..., t, 3] = x, y, th, v
    return out


def _xy(traj) -> np.ndarray:
    return traj.positions if isinstance(traj, Trajectory) else np.asarray(traj)[..., :2]


def ade(pred, ref) -> float:
    p, r = _xy(pred), _xy(ref)
    if p.shape != r.shape:
        raise KinematicsError(f"ade: length mismatch {p.shape} vs {r.shape}")
    return float(np.hypot(*(p - r).T).mean())


def fde(pred, ref) -> float:
    p, r = _xy(pred), _xy(ref)
    if p.shape != r.shape:
        raise KinematicsError(f"fde: length mismatch {p.shape} vs {r.shape}")
    d = p[-1] - r[-1]
    return float(math.hypot(d[0], d[1]))


def constant_velocity(start: EgoState, T: int, dt: float) -> Trajectory:
    return rollout_controls(start, [ControlInput(0.0, 0.0)] * T, dt)
