"""Autoregressive K-mode proposal generator.

Each mode starts from its own learnable query, reads the scene tokens with one
cross-attention per step, updates a GRU hidden state and emits squashed
(accel, yaw rate) controls that are integrated by the bicycle model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .kinematics import A_MAX, W_MAX, ControlInput, EgoState, Trajectory, wrap_angle
from .scenario import Scenario, token_mask
from .tensorcore import ParamStore, Tensor

# fixed per-feature scaling of raw scene tokens (see scenario.TOK_* layout)
TOKEN_SCALE = np.array([1 / 20, 1 / 20, 1 / 2, 1 / 5, 1 / 5, 1, 1, 1 / 6, 1 / 4,
                        1, 1, 1, 1 / 10, 1, 1 / 20, 1 / 20])
STATE_FEATURES = 6


@dataclass
class ChainConfig:
    K: int = 6
    T: int = 8
    dt: float = 0.5
    hidden_dim: int = 128
    n_tok_layers: int = 2
    query_dim: int = 64
    d_tok: int = 16
    a_max: float = A_MAX
    w_max: float = W_MAX
    query_std: float = 0.02

    def __post_init__(self):
        if self.K < 1 or self.T < 1:
            raise ValueError("K and T must be >= 1")


@dataclass
class ProposalSet:
    trajectories: list[Trajectory]
    mode_embeddings: np.ndarray
    controls: np.ndarray

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def positions(self) -> np.ndarray:
        return np.stack([t.positions for t in self.trajectories])


def _dense(store: ParamStore, rng, name: str, n_in: int, n_out: int, gain: float = 1.0) -> None:
    store.add(name + ".w", rng.standard_normal((n_in, n_out)) * gain / math.sqrt(n_in))
    store.add(name + ".b", np.zeros(n_out))


def init_mode_queries(config: ChainConfig, store: ParamStore, seed: int = 0) -> list[str]:
    rng = np.random.default_rng([seed, 101])
    names = []
    for k in range(config.K):
        n = f"chain.query.{k}"
        store.add(n, rng.standard_normal(config.hidden_dim) * config.query_std)
        names.append(n)
    return names


def init_chain(config: ChainConfig, store: ParamStore, seed: int = 0) -> ParamStore:
    H, Q = config.hidden_dim, config.query_dim
    rng = np.random.default_rng([seed, 100])
    init_mode_queries(config, store, seed)
    _dense(store, rng, "chain.tok.0", config.d_tok, H)
    for i in range(1, config.n_tok_layers):
        _dense(store, rng, f"chain.tok.{i}", H, H)
    _dense(store, rng, "chain.ego", 1, H)
    store.add("chain.attn.q", rng.standard_normal((H, Q)) / math.sqrt(H))
    store.add("chain.attn.k", rng.standard_normal((H, Q)) / math.sqrt(H))
    store.add("chain.attn.v", rng.standard_normal((H, H)) / math.sqrt(H))
    _dense(store, rng, "chain.state", STATE_FEATURES, H)
    for g in ("z", "r", "n"):
        _dense(store, rng, f"chain.gru.w{g}", 2 * H, H)
        store.add(f"chain.gru.u{g}", rng.standard_normal((H, H)) / math.sqrt(H))
    _dense(store, rng, "chain.head", H, 2, gain=0.01)
    return store


def _lin(x, p: ParamStore, name: str) -> Tensor:
    return tc.linear(x, p[name + ".w"], p[name + ".b"])


def encode_tokens(tokens: np.ndarray, p: ParamStore, cfg: ChainConfig):
    """Scene tokens [..., N, D_tok] -> (keys, values) for the per-step read."""
    h = tc.gelu(_lin(tokens * TOKEN_SCALE, p, "chain.tok.0"))
    for i in range(1, cfg.n_tok_layers):
        h = h + tc.gelu(_lin(h, p, f"chain.tok.{i}"))
    return tc.matmul(h, p["chain.attn.k"]), tc.matmul(h, p["chain.attn.v"])


def state_features(x, y, th, v, start: np.ndarray, step: int, T: int) -> Tensor:
    """Ego-start-relative pose features [..., 6] built on tape tensors."""
    c0, s0 = np.cos(start[..., 2]), np.sin(start[..., 2])
    dx, dy = x - start[..., 0], y - start[..., 1]
    rx = (dx * c0 + dy * s0) * (1 / 20)
    ry = (dy * c0 - dx * s0) * (1 / 20)
    rel = th - start[..., 2]
    feats = [rx, ry, tc.cos(rel), tc.sin(rel), v * (1 / 10),
             Tensor(np.full(np.shape(start[..., 0]), step / T))]
    return tc.stack(feats, axis=-1)


def control_step(hidden: Tensor, keys: Tensor, values: Tensor, mask: np.ndarray,
                 state_feat: Tensor, p: ParamStore, cfg: ChainConfig):
    """One predictor step: attention read, GRU update, squashed control head.

    hidden [B, K, H]; keys [B, N, Q]; values [B, N, H]; mask [B, N];
    state_feat [B, K, 6]. Returns (controls [B, K, 2], next hidden).
    """
    q = tc.matmul(hidden, p["chain.attn.q"])
    ctx = tc.attention(q, keys, values, mask[:, None, :])
    u = tc.concat([ctx, _lin(state_feat, p, "chain.state")], axis=-1)
    z = tc.sigmoid(_lin(u, p, "chain.gru.wz") + tc.matmul(hidden, p["chain.gru.uz"]))
    r = tc.sigmoid(_lin(u, p, "chain.gru.wr") + tc.matmul(hidden, p["chain.gru.ur"]))
    n = tc.tanh(_lin(u, p, "chain.gru.wn") + r * tc.matmul(hidden, p["chain.gru.un"]))
    nxt = (1.0 - z) * n + z * hidden
    ctrl = tc.tanh(_lin(nxt, p, "chain.head")) * np.array([cfg.a_max, cfg.w_max])
    if not np.isfinite(ctrl.data).all() or not np.isfinite(nxt.data).all():
        raise FloatingPointError("non-finite activations in control predictor")
    return ctrl, nxt


def bicycle_step_t(x, y, th, v, accel, yaw_rate, dt: float):
    """Tape version of kinematics.bicycle_step (controls assumed in bounds)."""
    x2 = x + v * tc.cos(th) * dt
    y2 = y + v * tc.sin(th) * dt
    th2 = tc.periodic_pass(th + yaw_rate * dt, wrap_angle)
    v2 = tc.relu(v + accel * dt)
    return x2, y2, th2, v2


def rollout_batch(tokens: np.ndarray, ego: np.ndarray, p: ParamStore, cfg: ChainConfig,
                  token_steps: np.ndarray | None = None):
    """Differentiable rollout for a batch.

    tokens [B, N, D_tok]; ego [B, 4] start states. ``token_steps`` optionally
    overrides tokens per step as [T, B, N, D_tok]. Returns (states [B, K, T, 4]
    tensor, controls [B, K, T, 2] tensor, final hidden [B, K, H]).
    """
    B = ego.shape[0]
    K, T = cfg.K, cfg.T
    ego = np.asarray(ego, dtype=np.float64)
    queries = tc.stack([p[f"chain.query.{k}"] for k in range(K)], axis=0)
    ego_emb = _lin(ego[:, 3:4] * (1 / 10), p, "chain.ego")
    hidden = tc.tanh(tc.reshape(ego_emb, (B, 1, -1)) + queries)
    start = np.broadcast_to(ego[:, None, :], (B, K, 4))
    x, y = Tensor(start[..., 0].copy()), Tensor(start[..., 1].copy())
    th, v = Tensor(start[..., 2].copy()), Tensor(start[..., 3].copy())
    if token_steps is None:
        keys, values = encode_tokens(tokens, p, cfg)
        mask = token_mask(tokens)
    states, ctrls = [], []
    for t in range(T):
        if token_steps is not None:
            keys, values = encode_tokens(token_steps[t], p, cfg)
            mask = token_mask(token_steps[t])
        feat = state_features(x, y, th, v, start, t, T)
        ctrl, hidden = control_step(hidden, keys, values, mask, feat, p, cfg)
        x, y, th, v = bicycle_step_t(x, y, th, v, ctrl[..., 0], ctrl[..., 1], cfg.dt)
        states.append(tc.stack([x, y, th, v], axis=-1))
        ctrls.append(ctrl)
    return tc.stack(states, axis=2), tc.stack(ctrls, axis=2), hidden


def predict_controls(hidden_state: np.ndarray, scene_tokens: np.ndarray, ego_state: EgoState,
                     params: ParamStore, config: ChainConfig, start: EgoState | None = None,
                     step: int = 0):
    """Single-mode, single-step convenience wrapper returning (ControlInput, next hidden)."""
    with tc.no_grad():
        keys, values = encode_tokens(scene_tokens[None], params, config)
        st = np.array([[(start or ego_state).x, (start or ego_state).y,
                        (start or ego_state).heading, (start or ego_state).speed]])[:, None, :]
        feat = state_features(Tensor(np.array([[ego_state.x]])), Tensor(np.array([[ego_state.y]])),
                              Tensor(np.array([[ego_state.heading]])),
                              Tensor(np.array([[ego_state.speed]])), st, step, config.T)
        h = Tensor(np.asarray(hidden_state, dtype=np.float64).reshape(1, 1, -1))
        ctrl, nxt = control_step(h, keys, values, token_mask(scene_tokens[None]), feat,
                                 params, config)
    a, w = ctrl.data.reshape(2)
    return ControlInput(float(a), float(w)), nxt.data.reshape(-1)


def rollout_modes(scenario: Scenario, params: ParamStore, config: ChainConfig,
                  token_steps: np.ndarray | None = None) -> ProposalSet:
    ego = scenario.ego_init.as_array()[None]
    with tc.no_grad():
        states, ctrls, hidden = rollout_batch(
            scenario.scene_tokens[None], ego, params, config,
            None if token_steps is None else token_steps[:, None])
    trajs = [Trajectory(states.data[0, k], config.dt) for k in range(config.K)]
    return ProposalSet(trajs, hidden.data[0].copy(), ctrls.data[0].copy())
