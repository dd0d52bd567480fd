import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chainflow.evaluate import evaluate_trajectories
from chainflow.kinematics import EgoState, Trajectory
from chainflow.metrics import (MetricConfig, SubScores, comfort, drivable_compliance,
                               ego_progress, min_time_to_collision, mini_pdms, no_collision,
                               score_trajectory, time_to_collision)
from chainflow.scenario import (Obstacle, ScenarioConfig, from_record, generate_scenario,
                                to_record)

unit = st.floats(0, 1)


def _straight(seed=0):
    return generate_scenario(seed, ScenarioConfig(max_obstacles=0), maneuver="straight")


def test_expert_scores_full(small_dataset):
    for s in small_dataset:
        sub = score_trajectory(s.expert, s)
        assert (sub.nc, sub.dac, sub.ep) == (1.0, 1.0, 1.0)
        assert sub.comfort == 1.0


def test_obstacle_on_path_collides():
    s = _straight()
    mid = s.expert.positions[3]
    hit = dataclasses.replace(s, obstacles=[Obstacle((float(mid[0]), float(mid[1])), 1.0)])
    assert no_collision(s.expert, hit) == 0.0
    assert time_to_collision(s.expert, hit) < 1.0


def test_half_progress():
    s = _straight(1)
    ego = np.array([s.ego_init.x, s.ego_init.y])
    half = ego + 0.5 * (s.expert.positions - ego)
    assert ego_progress(half, s) == pytest.approx(0.5, abs=1 / 8)
    assert ego_progress(s.expert.positions * 3, s) == 1.0  # clipped


def test_off_corridor():
    s = _straight(2)
    off = s.expert.positions + [0, s.corridor.half_width + 0.5]
    assert drivable_compliance(off, s) == 0.0


def test_pdms_examples():
    assert mini_pdms(SubScores(0, 1, 1, 1, 1)) == 0.0
    assert mini_pdms(SubScores(1, 0, 1, 1, 1)) == 0.0
    assert mini_pdms(SubScores(1, 1, 1, 1, 1)) == 1.0
    assert mini_pdms(SubScores(1, 1, 0.9, 1, 1)) == pytest.approx(11.5 / 12)
    assert round(mini_pdms(SubScores(1, 1, 0.9, 1, 1)), 4) == 0.9583


@given(st.sampled_from([0.0, 1.0]), st.sampled_from([0.0, 1.0]), unit, unit, unit,
       st.integers(0, 4), st.floats(0, 0.5))
def test_pdms_monotone(nc, dac, ep, ttc, cf, which, bump):
    base = [nc, dac, ep, ttc, cf]
    up = list(base)
    up[which] = min(1.0, up[which] + bump) if which >= 2 else 1.0
    assert mini_pdms(SubScores(*up)) >= mini_pdms(SubScores(*base))
    assert 0.0 <= mini_pdms(SubScores(*base)) <= 1.0


def _rigid(s, phi, dx, dy):
    c, sn = math.cos(phi), math.sin(phi)

    def tf(p):
        p = np.asarray(p, dtype=float)
        return np.stack([c * p[..., 0] - sn * p[..., 1] + dx, sn * p[..., 0] + c * p[..., 1] + dy], -1)

    rec = to_record(s)
    rec["corridor"]["centerline"] = tf(rec["corridor"]["centerline"]).tolist()
    for o in rec["obstacles"]:
        o["center"] = tf(o["center"]).tolist()
        o["velocity"] = (tf(o["velocity"]) - [dx, dy]).tolist()
    e = rec["ego_init"]
    e["x"], e["y"] = tf([e["x"], e["y"]]).tolist()
    e["heading"] = math.remainder(e["heading"] + phi, 2 * math.pi)
    states = np.array(rec["expert"]["states"])
    states[:, :2] = tf(states[:, :2])
    rec["expert"]["states"] = states.tolist()
    return from_record(rec), tf


@given(st.floats(-math.pi, math.pi), st.floats(-100, 100), st.floats(-100, 100), st.integers(0, 30))
def test_rigid_motion_invariance(phi, dx, dy, seed):
    s = generate_scenario(seed, ScenarioConfig(moving_obstacles=True))
    t, tf = _rigid(s, phi, dx, dy)
    rng = np.random.default_rng(seed)
    cand = s.expert.positions + rng.normal(0, 1.5, (8, 2))
    a = score_trajectory(cand, s)
    b = score_trajectory(tf(cand), t)
    assert (a.nc, a.dac, a.comfort) == (b.nc, b.dac, b.comfort)
    assert a.ep == pytest.approx(b.ep, abs=1e-9)
    assert a.ttc == pytest.approx(b.ttc, abs=1e-9)


@given(st.integers(0, 200), st.floats(0.5, 4.0))
def test_interpolated_nc_stricter(seed, r):
    s = _straight(seed % 5)
    rng = np.random.default_rng(seed)
    xy = s.expert.positions
    k = rng.integers(0, 7)
    mid = 0.5 * (xy[k] + xy[k + 1]) + rng.normal(0, 1.5, 2)
    t = dataclasses.replace(s, obstacles=[Obstacle(tuple(mid), r)])
    dense = no_collision(xy, t)
    coarse = no_collision(xy, t, substeps=1)
    assert dense <= coarse


def test_ttc_head_on():
    s = _straight()
    v = s.ego_init.speed
    # obstacle 40 m ahead on the lane, closing at 10 m/s
    obs = Obstacle((40.0, 0.0), 1.0, (-10.0, 0.0))
    cv = np.array([[v * 0.5, 0.0]])
    t = dataclasses.replace(s, obstacles=[obs])
    tau = min_time_to_collision(cv, t)
    # at t=0.5 the gap is 40 - 5 - 0.5 v minus both radii, closing at v + 10
    assert tau == pytest.approx((40 - 5 - 0.5 * v - 2) / (v + 10), rel=1e-9)
    assert time_to_collision(cv, t) == pytest.approx(min(1.0, tau / 3.0))
    away = dataclasses.replace(s, obstacles=[Obstacle((-40.0, 0.0), 1.0, (-10.0, 0.0))])
    assert time_to_collision(cv, away) == 1.0


def test_comfort_jagged():
    s = _straight()
    jag = s.expert.positions.copy()
    jag[4, 0] += 1.0
    assert comfort(jag, s) == 0.0
    assert comfort(s.expert, s) == 1.0


def test_expert_as_planner_report(small_dataset):
    rep = evaluate_trajectories(small_dataset, lambda s: s.expert, arm="expert")
    agg = rep.aggregates("expert")
    assert 100 * agg["nc"] == 100 and 100 * agg["dac"] == 100 and 100 * agg["ep"] == 100
    assert all(r["pdms"] == 0.0 for r in rep.rows if r["nc"] == 0.0 or r["dac"] == 0.0)
    text = rep.to_csv()
    assert text.splitlines()[-1].startswith("MEAN,expert")
    assert "PDMS" in rep.summary()


def test_metric_config_is_frozen():
    with pytest.raises(dataclasses.FrozenInstanceError):
        MetricConfig().ttc_horizon = 5
