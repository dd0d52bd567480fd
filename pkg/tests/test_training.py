import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chainflow import tensorcore as tc
from chainflow.model import build_planner
from chainflow.scenario import ScenarioConfig, generate_dataset
from chainflow.training import (LossWeights, TrainConfig, loss_diff, loss_traj_stage1, lr_at,
                                per_mode_mse, sample_timesteps, stage1_step, stage2_step,
                                train_stage, wta_assign)

from conftest import tiny_planner_config

TINY_DATA = ScenarioConfig(T=3, d_sem=5)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(5, 8, TINY_DATA)


def _snapshot(planner, prefix=""):
    return {n: planner.params[n].data.copy() for n in planner.params.names(prefix)}


# ------------------------------------------------------------------ lr schedule


def test_lr_examples():
    cfg = TrainConfig(batch_size=64, base_lr=2e-4)
    assert lr_at(100, 1000, cfg) == pytest.approx(2e-4)
    assert lr_at(100, 1000, dataclasses.replace(cfg, batch_size=16)) == pytest.approx(1e-4)
    assert lr_at(1000, 1000, cfg) == pytest.approx(0.0, abs=1e-20)
    assert lr_at(50, 1000, cfg) == pytest.approx(1e-4)
    assert lr_at(550, 1000, cfg) == pytest.approx(1e-4)
    with pytest.raises(ValueError):
        lr_at(0, 0, cfg)
    with pytest.raises(ValueError):
        lr_at(11, 10, cfg)


@given(st.integers(1, 5000), st.data())
def test_lr_bounds(total, data):
    cfg = TrainConfig(batch_size=32)
    s = data.draw(st.integers(0, total))
    peak = cfg.base_lr * np.sqrt(32 / 64)
    assert 0.0 <= lr_at(s, total, cfg) <= peak * (1 + 1e-12)


# ------------------------------------------------------------------ WTA


def test_wta_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        K = int(rng.integers(1, 7))
        P = rng.normal(0, 5, (K, 8, 2))
        E = rng.normal(0, 5, (8, 2))
        brute = min(range(K), key=lambda k: sum(float(np.hypot(*(P[k, i] - E[i])))
                                                for i in range(8)))
        assert wta_assign(P, E) == brute
        shift = rng.normal(0, 50, 2)
        assert wta_assign(P + shift, E + shift) == brute


def test_wta_examples():
    E = np.zeros((8, 2))
    # summed distance, not Frobenius: one 4 m miss (sum 4) beats eight 1 m misses (sum 8)
    spike = E.copy()
    spike[0] = [0, 4.0]
    assert wta_assign(np.stack([E + [0, 1.0], spike]), E) == 1
    P = np.stack([E + [0, 3.0], E + [0, 1.0]])
    assert wta_assign(P, E) == 1
    assert wta_assign(P[:1], E) == 0
    assert wta_assign(np.stack([E, E]), E) == 0
    with pytest.raises(ValueError):
        wta_assign(np.zeros((0, 8, 2)), E)


def test_stage1_loss_is_min_over_modes():
    rng = np.random.default_rng(1)
    states = tc.Tensor(rng.normal(0, 2, (4, 3, 5, 4)))
    expert = rng.normal(0, 2, (4, 5, 2))
    loss, k = loss_traj_stage1(states, expert)
    xy = states.data[..., :2]
    per = ((xy - expert[:, None]) ** 2).mean(axis=(-1, -2))
    assert np.array_equal(k, [wta_assign(xy[b], expert[b]) for b in range(4)])
    assert loss.item() == pytest.approx(per[np.arange(4), k].mean(), rel=1e-12)
    assert per_mode_mse(states, expert).shape == (4, 3)


def test_loss_diff_examples_and_gradient():
    eps = np.zeros((2, 3, 2))
    assert loss_diff(eps, tc.Tensor(eps)).item() == 0.0
    assert loss_diff(eps, tc.Tensor(np.ones_like(eps))).item() == pytest.approx(1.0)
    rng = np.random.default_rng(2)
    e = rng.standard_normal((2, 3, 2))
    h = tc.Tensor(rng.standard_normal((2, 3, 2)), requires_grad=True)
    errs = tc.gradcheck(lambda: loss_diff(e, h), {"h": h}, eps=1e-6)
    assert errs["h"] < 1e-6


def test_timestep_deciles():
    t = sample_timesteps(np.random.default_rng(0), 200_000, 1000)
    assert t.min() == 1 and t.max() == 1000
    frac = np.bincount((t - 1) // 100, minlength=10) / len(t)
    assert np.all(np.abs(frac - 0.1) < 0.01)


# ------------------------------------------------------------------ steps


def test_stage1_descends(tiny_data):
    cfg = TrainConfig(batch_size=4, weight_decay=0.0)
    wins = 0
    for seed in range(10):
        planner = build_planner(tiny_planner_config(), seed=seed)
        batch = tiny_data[:4]
        first = stage1_step(batch, planner, cfg, 3e-3, np.random.default_rng(seed))
        for _ in range(4):
            last = stage1_step(batch, planner, cfg, 3e-3, np.random.default_rng(seed))
        wins += last["loss_traj"] < first["loss_traj"]
    assert wins >= 9


def test_stage2_zero_weights_no_update(tiny_data):
    planner = build_planner(tiny_planner_config(), seed=0)
    before = _snapshot(planner)
    cfg = TrainConfig(weight_decay=0.0, weights=LossWeights(0, 0, 0, 0))
    out = stage2_step(tiny_data[:3], planner, cfg, 1e-2, np.random.default_rng(0))
    assert out["loss_total"] == 0.0
    for n, v in before.items():
        assert np.array_equal(planner.params[n].data, v), n


def test_stage2_diff_only_and_frozen_chain(tiny_data):
    planner = build_planner(tiny_planner_config(), seed=1)
    chain0, flow0 = _snapshot(planner, "chain."), _snapshot(planner, "flow.")
    cfg = TrainConfig(weights=LossWeights(1, 10, 0, 0))
    out = stage2_step(tiny_data[:4], planner, cfg, 1e-3, np.random.default_rng(1))
    assert out["loss_total"] == pytest.approx(10 * out["loss_diff"], rel=1e-12)
    cfg = TrainConfig()
    stage2_step(tiny_data[:4], planner, cfg, 1e-3, np.random.default_rng(2))
    for n, v in chain0.items():
        assert np.array_equal(planner.params[n].data, v), n
    assert any(not np.array_equal(planner.params[n].data, v) for n, v in flow0.items())


def test_stage1_leaves_flow_alone(tiny_data):
    planner = build_planner(tiny_planner_config(), seed=2)
    flow0 = _snapshot(planner, "flow.")
    stage1_step(tiny_data[:4], planner, TrainConfig(), 1e-3, np.random.default_rng(0))
    for n, v in flow0.items():
        assert np.array_equal(planner.params[n].data, v), n


def test_train_stage_bit_exact(tiny_data, tmp_path):
    cfg = TrainConfig(batch_size=4, seed=3)

    def run(d):
        planner = build_planner(tiny_planner_config(), seed=0)
        train_stage(1, tiny_data, planner, cfg, d, epochs=2)
        train_stage(2, tiny_data, planner, cfg, d, epochs=1)
        return planner

    a, b = run(tmp_path / "a"), run(tmp_path / "b")
    for n in a.params.names():
        assert np.array_equal(a.params[n].data, b.params[n].data), n
    log_a = (tmp_path / "a" / "train_log.csv").read_text()
    assert log_a == (tmp_path / "b" / "train_log.csv").read_text()
    assert len(log_a.splitlines()) == 1 + 2 * 2 + 2
    assert (tmp_path / "a" / "stage1.ckpt").exists() and (tmp_path / "a" / "stage2.ckpt").exists()


def test_divergence_is_reported(tiny_data):
    planner = build_planner(tiny_planner_config(), seed=0)
    name = planner.params.names("chain.")[0]
    planner.params[name].data = planner.params[name].data * np.nan
    with pytest.raises(FloatingPointError, match="non-finite"):
        stage1_step(tiny_data[:2], planner, TrainConfig(), 1e-3, np.random.default_rng(0), step=7)


def test_weights_validated():
    with pytest.raises(ValueError):
        LossWeights(lambda2=-1)
