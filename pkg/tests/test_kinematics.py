import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chainflow.kinematics import (A_MAX, W_MAX, ControlInput, EgoState, KinematicsError,
                                  Trajectory, ade, bicycle_step, constant_velocity, fde,
                                  rollout_array, rollout_controls, wrap_angle)

finite = st.floats(-50, 50, allow_nan=False)
heading = st.floats(-math.pi, math.pi, allow_nan=False)
speed = st.floats(0, 30, allow_nan=False)
ctrl = st.builds(ControlInput, st.floats(-10, 10), st.floats(-3, 3))
state = st.builds(EgoState, finite, finite, heading, speed)


def test_worked_examples_exact():
    assert bicycle_step(EgoState(0, 0, 0, 10), ControlInput(0, 0), 0.5) == EgoState(5, 0, 0, 10)
    assert bicycle_step(EgoState(0, 0, 0, 10), ControlInput(2, 0.2), 0.5) == EgoState(5, 0, 0.1, 11)


@given(state, ctrl)
def test_tiny_dt_is_identity(s, c):
    out = bicycle_step(s, c, 1e-9)
    assert np.allclose(out.as_array(), s.as_array(), atol=1e-6)


def test_rollout_two_steps():
    tr = rollout_controls(EgoState(0, 0, 0, 10), [ControlInput(0, 0)] * 2, 0.5)
    assert tr.states == [EgoState(5, 0, 0, 10), EgoState(10, 0, 0, 10)]
    assert tr.dt == 0.5


def test_rollout_replay_and_brake_clamp():
    rng = np.random.default_rng(0)
    cs = [ControlInput(*rng.uniform(-4, 4, 2)) for _ in range(8)]
    tr = rollout_controls(EgoState(1, 2, 0.3, 7), cs, 0.5)
    s = EgoState(1, 2, 0.3, 7)
    for c, got in zip(cs, tr):
        s = bicycle_step(s, c, 0.5)
        assert s == got
    hard = rollout_controls(EgoState(0, 0, 0, 3), [ControlInput(-25, 0)] * 8, 0.5)
    assert all(x.speed >= 0 for x in hard)


def test_errors():
    with pytest.raises(KinematicsError):
        rollout_controls(EgoState(0, 0, 0, 1), [], 0.5)
    with pytest.raises(KinematicsError):
        bicycle_step(EgoState(float("nan"), 0, 0, 1), ControlInput(0, 0), 0.5)
    with pytest.raises(KinematicsError):
        bicycle_step(EgoState(0, 0, 0, 1), ControlInput(float("inf"), 0), 0.5)
    with pytest.raises(KinematicsError):
        ade(np.zeros((3, 2)), np.zeros((4, 2)))


@given(state, st.lists(ctrl, min_size=1, max_size=10), heading)
def test_rotation_equivariance(s, cs, phi):
    base = rollout_controls(s, cs, 0.5)
    c, sn = math.cos(phi), math.sin(phi)
    rs = EgoState(c * s.x - sn * s.y, sn * s.x + c * s.y, wrap_angle(s.heading + phi), s.speed)
    rot = rollout_controls(rs, cs, 0.5)
    p = base.positions
    expect = np.stack([c * p[:, 0] - sn * p[:, 1], sn * p[:, 0] + c * p[:, 1]], 1)
    assert np.allclose(rot.positions, expect, atol=1e-9, rtol=0)


@given(state, st.lists(ctrl, min_size=1, max_size=10), finite, finite)
def test_translation_equivariance(s, cs, dx, dy):
    a = rollout_controls(s, cs, 0.5)
    b = rollout_controls(EgoState(s.x + dx, s.y + dy, s.heading, s.speed), cs, 0.5)
    assert np.allclose(b.positions, a.positions + [dx, dy], atol=1e-9)
    assert ade(a.positions + [dx, dy], b) < 1e-9


def test_heading_wrap_and_speed_clamp_10k():
    rng = np.random.default_rng(1)
    n = 10_000
    start = np.column_stack([rng.uniform(-10, 10, (n, 2)), rng.uniform(-math.pi, math.pi, n),
                             rng.uniform(0, 20, n)])
    u = np.column_stack([rng.uniform(-30, 30, n), rng.uniform(-20, 20, n)])[:, None, :]
    out = rollout_array(start, u, 0.5)[:, 0]
    assert ((out[:, 2] > -math.pi) & (out[:, 2] <= math.pi)).all()
    assert (out[:, 3] >= 0).all()


def test_wrap_angle_boundary():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)


@given(state, st.lists(ctrl, min_size=1, max_size=8))
def test_vectorized_rollout_matches_scalar(s, cs):
    tr = rollout_controls(s, cs, 0.5)
    arr = rollout_array(s.as_array(), [[c.accel, c.yaw_rate] for c in cs], 0.5)
    assert np.array_equal(arr, tr.array)


def test_control_bounds_default():
    assert ControlInput(9, -9).clamped() == ControlInput(A_MAX, -W_MAX)


def test_ade_fde_examples():
    pred = np.zeros((2, 2))
    ref = np.array([[3.0, 4.0], [6.0, 8.0]])
    assert ade(pred, ref) == 7.5
    assert fde(pred, ref) == 10.0
    t = constant_velocity(EgoState(0, 0, 0, 4), 5, 0.5)
    assert ade(t, t) == 0.0
    assert ade(t.positions + [1, 0], t) == pytest.approx(1.0)
    assert fde(t.positions + [1, 0], t) == pytest.approx(1.0)


def test_from_positions_recovers_rollout_state():
    cs = [ControlInput(1.0, 0.1)] * 6
    start = EgoState(0, 0, 0.2, 8)
    tr = rollout_controls(start, cs, 0.5)
    rebuilt = Trajectory.from_positions(tr.positions, start, 0.5)
    assert np.allclose(rebuilt.positions, tr.positions)
    assert ((rebuilt.array[:, 2] > -math.pi) & (rebuilt.array[:, 2] <= math.pi)).all()
