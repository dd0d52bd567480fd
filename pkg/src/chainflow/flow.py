"""Residual diffusion refiner: cosine schedule, forward noising, DiT-style
noise predictor and deterministic DDIM sampling around each proposal."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensorcore as tc
from .chain import TOKEN_SCALE
from .kinematics import EgoState, Trajectory
from .scenario import token_mask
from .tensorcore import ParamStore, Tensor

ALPHA_BAR_FLOOR = 1e-5


@dataclass
class FlowConfig:
    n_blocks: int = 4
    model_dim: int = 128
    n_heads: int = 4
    mlp_ratio: int = 2
    conditioning_source: str = "semantic_ctx"
    space: str = "residual"
    n_train_steps: int = 1000
    n_infer_steps: int = 4
    target_scale: float | None = None
    T: int = 8
    dt: float = 0.5
    d_sem: int = 32
    d_tok: int = 16
    time_embed_dim: int = 64
    x0_clip: float | None = 4.0  # clamp on the predicted clean target, normalized units

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")
        if self.conditioning_source not in ("semantic_ctx", "scene_tokens"):
            raise ValueError(f"unknown conditioning_source {self.conditioning_source!r}")
        if self.space not in ("residual", "trajectory"):
            raise ValueError(f"unknown space {self.space!r}")

    @property
    def scale(self) -> float:
        if self.target_scale is not None:
            return self.target_scale
        return 2.0 if self.space == "residual" else 20.0

    @property
    def cond_dim(self) -> int:
        return self.d_sem if self.conditioning_source == "semantic_ctx" else self.d_tok


# ------------------------------------------------------------------ schedule


@dataclass(frozen=True)
class NoiseSchedule:
    n_train_steps: int
    alpha_bar: np.ndarray


@dataclass(frozen=True)
class NoisySample:
    z: np.ndarray
    t: int
    eps: np.ndarray


def build_schedule(n_train_steps: int = 1000, s: float = 0.008) -> NoiseSchedule:
    """Cosine cumulative-signal schedule, mapped affinely onto [floor, 1].

    The affine map (instead of hard clipping) keeps the sequence strictly
    decreasing all the way to t = n.
    """
    if n_train_steps < 1:
        raise ValueError("n_train_steps must be >= 1")
    t = np.arange(n_train_steps + 1) / n_train_steps
    f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
    raw = f / np.cos(s / (1 + s) * np.pi / 2) ** 2
    ab = ALPHA_BAR_FLOOR + (1 - ALPHA_BAR_FLOOR) * (raw - raw[-1]) / (1 - raw[-1])
    ab[0] = 1.0
    return NoiseSchedule(n_train_steps, ab)


def _alpha(schedule: NoiseSchedule, t: int) -> float:
    if not 0 <= t <= schedule.n_train_steps:
        raise ValueError(f"timestep {t} outside [0, {schedule.n_train_steps}]")
    return float(schedule.alpha_bar[t])


def q_sample(residual, t: int, eps, schedule: NoiseSchedule) -> NoisySample:
    ab = _alpha(schedule, t)
    z = math.sqrt(ab) * np.asarray(residual) + math.sqrt(1 - ab) * np.asarray(eps)
    return NoisySample(z, t, np.asarray(eps))


def x0_from_eps(z, t: int, eps_hat, schedule: NoiseSchedule):
    """Invert the forward noising for a predicted noise (arrays or tensors)."""
    ab = _alpha(schedule, t)
    if ab < ALPHA_BAR_FLOOR:
        raise ValueError(f"alpha_bar[{t}] = {ab} below floor {ALPHA_BAR_FLOOR}")
    return (z - eps_hat * math.sqrt(1 - ab)) * (1 / math.sqrt(ab))


def ddim_timesteps(n_train_steps: int, n_steps: int) -> np.ndarray:
    if not 1 <= n_steps <= n_train_steps:
        raise ValueError(f"n_steps must be in [1, {n_train_steps}], got {n_steps}")
    return np.round(np.linspace(n_train_steps, 0, n_steps + 1)).astype(int)


def ddim_sample(predict: Callable, z, schedule: NoiseSchedule, n_steps: int,
                x0_clip: float | None = None):
    """Deterministic (eta = 0) DDIM from ``z`` at t = n down to t = 0.

    ``predict(z, t)`` returns the noise estimate; works on arrays or tensors.
    With ``x0_clip`` the clean estimate is clamped and the noise re-derived
    from it, which bounds the first high-noise step of an untrained model.
    """
    ts = ddim_timesteps(schedule.n_train_steps, n_steps)
    for t, t_next in zip(ts[:-1], ts[1:]):
        eps = predict(z, int(t))
        x0 = x0_from_eps(z, int(t), eps, schedule)
        if x0_clip is not None:
            x0 = tc.clip(x0, -x0_clip, x0_clip) if isinstance(x0, Tensor) else np.clip(x0, -x0_clip, x0_clip)
            a_t = float(schedule.alpha_bar[t])
            eps = (z - x0 * math.sqrt(a_t)) * (1 / math.sqrt(1 - a_t))
        ab = float(schedule.alpha_bar[t_next])
        z = x0 * math.sqrt(ab) + eps * math.sqrt(1 - ab)
    return z


# ------------------------------------------------------------------ frames


def to_ego_frame(xy: np.ndarray, ego: np.ndarray) -> np.ndarray:
    """World positions [..., T, 2] -> frame of ego [..., 4] (broadcast over T)."""
    c, s = np.cos(ego[..., 2])[..., None], np.sin(ego[..., 2])[..., None]
    dx = xy[..., 0] - ego[..., 0, None]
    dy = xy[..., 1] - ego[..., 1, None]
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def rotate_to_ego(v: np.ndarray, ego: np.ndarray) -> np.ndarray:
    c, s = np.cos(ego[..., 2])[..., None], np.sin(ego[..., 2])[..., None]
    return np.stack([c * v[..., 0] + s * v[..., 1], -s * v[..., 0] + c * v[..., 1]], axis=-1)


def rotate_to_world(v: np.ndarray, ego: np.ndarray) -> np.ndarray:
    c, s = np.cos(ego[..., 2])[..., None], np.sin(ego[..., 2])[..., None]
    return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1]], axis=-1)


def rotate_to_world_t(v: Tensor, ego: np.ndarray) -> Tensor:
    c, s = np.cos(ego[..., 2])[..., None], np.sin(ego[..., 2])[..., None]
    vx, vy = v[..., 0], v[..., 1]
    return tc.stack([vx * c - vy * s, vx * s + vy * c], axis=-1)


def anchor_positions(proposal_xy: np.ndarray, ego: np.ndarray, cfg: FlowConfig) -> np.ndarray:
    """The positions refined samples are added to: the proposal, or the ego origin."""
    if cfg.space == "residual":
        return np.asarray(proposal_xy, dtype=np.float64)
    return np.broadcast_to(ego[..., None, :2], np.shape(proposal_xy)).copy()


def make_target(expert_xy: np.ndarray, proposal_xy: np.ndarray, ego: np.ndarray,
                cfg: FlowConfig) -> np.ndarray:
    """Normalized ego-frame diffusion target (residual or absolute trajectory)."""
    anchor = anchor_positions(proposal_xy, ego, cfg)
    return rotate_to_ego(np.asarray(expert_xy) - anchor, ego) / cfg.scale


def residual_target(expert: Trajectory, proposal: Trajectory) -> np.ndarray:
    """World-frame residual expert - proposal on (x, y)."""
    if len(expert) != len(proposal):
        raise ValueError(f"length mismatch {len(expert)} vs {len(proposal)}")
    return expert.positions - proposal.positions


# ------------------------------------------------------------------ model


def _dense(store, rng, name, n_in, n_out, gain=1.0):
    store.add(name + ".w", rng.standard_normal((n_in, n_out)) * gain / math.sqrt(n_in))
    store.add(name + ".b", np.zeros(n_out))


def init_flow(config: FlowConfig, store: ParamStore, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng([seed, 200])
    D = config.model_dim
    _dense(store, rng, "flow.in", 4, D)
    _dense(store, rng, "flow.temb.0", config.time_embed_dim, D)
    _dense(store, rng, "flow.temb.1", D, D)
    _dense(store, rng, "flow.ego", 1, D)
    _dense(store, rng, "flow.cond", config.cond_dim, D)
    for b in range(config.n_blocks):
        pre = f"flow.blk{b}"
        _dense(store, rng, pre + ".ada", D, 6 * D, gain=0.1)
        for nm in ("sa", "ca"):
            for m in ("q", "k", "v", "o"):
                _dense(store, rng, f"{pre}.{nm}.{m}", D, D)
        store.add(pre + ".ln_ca.g", np.ones(D))
        store.add(pre + ".ln_ca.b", np.zeros(D))
        _dense(store, rng, pre + ".mlp.0", D, config.mlp_ratio * D)
        _dense(store, rng, pre + ".mlp.1", config.mlp_ratio * D, D)
    _dense(store, rng, "flow.final.ada", D, 2 * D, gain=0.1)
    _dense(store, rng, "flow.out", D, 2, gain=0.1)
    return store


def _lin(x, p, name):
    return tc.linear(x, p[name + ".w"], p[name + ".b"])


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def position_encoding(T: int, dim: int) -> np.ndarray:
    return timestep_embedding(np.arange(T), dim)


def multi_head_attention(xq: Tensor, xkv: Tensor, p: ParamStore, name: str, n_heads: int,
                         mask: np.ndarray | None = None) -> Tensor:
    B, Lq, D = xq.shape
    Lk = xkv.shape[1]
    dh = D // n_heads

    def heads(x, L):
        return tc.transpose(tc.reshape(x, (B, L, n_heads, dh)), (0, 2, 1, 3))

    q = heads(_lin(xq, p, name + ".q"), Lq)
    k = heads(_lin(xkv, p, name + ".k"), Lk)
    v = heads(_lin(xkv, p, name + ".v"), Lk)
    m = None if mask is None else mask[:, None, None, :]
    o = tc.attention(q, k, v, m)
    o = tc.reshape(tc.transpose(o, (0, 2, 1, 3)), (B, Lq, D))
    return _lin(o, p, name + ".o")


def prepare_conditioning(cond: np.ndarray, cfg: FlowConfig):
    """Raw conditioning [B, N, Dc] -> (scaled features, attention mask or None)."""
    cond = np.asarray(cond, dtype=np.float64)
    if cfg.conditioning_source == "scene_tokens":
        return cond * TOKEN_SCALE, token_mask(cond)
    return cond, None


def eps_model(z, t: np.ndarray, ego_speed: np.ndarray, cond: np.ndarray,
              cond_mask: np.ndarray | None, prop_feat: np.ndarray, p: ParamStore,
              cfg: FlowConfig) -> Tensor:
    """Batched noise predictor.

    z [B, T, 2] (array or tensor, normalized units); t [B] integer steps;
    ego_speed [B]; cond [B, N, Dc] already prepared; prop_feat [B, T, 2]
    ego-frame proposal positions scaled by 1/20. Returns [B, T, 2].
    """
    z = tc.as_tensor(z)
    B, T, _ = z.shape
    D = cfg.model_dim
    x = _lin(tc.concat([z, Tensor(prop_feat)], axis=-1), p, "flow.in") + position_encoding(T, D)
    temb = timestep_embedding(np.broadcast_to(t, (B,)), cfg.time_embed_dim)
    c = _lin(tc.silu(_lin(temb, p, "flow.temb.0")), p, "flow.temb.1")
    c = c + _lin(np.asarray(ego_speed, dtype=np.float64).reshape(B, 1) / 10, p, "flow.ego")
    ctx = _lin(cond, p, "flow.cond")
    sc = tc.silu(c)
    for b in range(cfg.n_blocks):
        pre = f"flow.blk{b}"
        mod = tc.reshape(_lin(sc, p, pre + ".ada"), (B, 1, 6 * D))
        sh1, s1, g1, sh2, s2, g2 = (mod[..., i * D:(i + 1) * D] for i in range(6))
        h = tc.adaptive_modulate(x, s1, sh1)
        x = x + g1 * multi_head_attention(h, h, p, pre + ".sa", cfg.n_heads)
        h = tc.layer_norm(x, p[pre + ".ln_ca.g"], p[pre + ".ln_ca.b"])
        x = x + multi_head_attention(h, ctx, p, pre + ".ca", cfg.n_heads, cond_mask)
        h = tc.adaptive_modulate(x, s2, sh2)
        x = x + g2 * _lin(tc.gelu(_lin(h, p, pre + ".mlp.0")), p, pre + ".mlp.1")
    mod = tc.reshape(_lin(sc, p, "flow.final.ada"), (B, 1, 2 * D))
    out = _lin(tc.adaptive_modulate(x, mod[..., D:], mod[..., :D]), p, "flow.out")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite activations in noise predictor")
    return out


def proposal_features(proposal_xy: np.ndarray, ego: np.ndarray, cfg: FlowConfig) -> np.ndarray:
    if cfg.space == "trajectory":
        return np.zeros(np.shape(proposal_xy))
    return to_ego_frame(np.asarray(proposal_xy, dtype=np.float64), ego) / 20.0


def eps_predict(z, t: int, ego: EgoState, conditioning: np.ndarray, proposal: Trajectory,
                params: ParamStore, config: FlowConfig) -> np.ndarray:
    """Single-sample noise prediction for a [T, 2] noisy target."""
    e = ego.as_array()[None]
    cond, mask = prepare_conditioning(conditioning[None], config)
    with tc.no_grad():
        out = eps_model(np.asarray(z)[None], np.array([t]), e[:, 3], cond, mask,
                        proposal_features(proposal.positions[None], e, config), params, config)
    return out.data[0]


def refine_batch(proposal_xy: np.ndarray, ego: np.ndarray, cond: np.ndarray,
                 z_init: np.ndarray, params: ParamStore, cfg: FlowConfig,
                 schedule: NoiseSchedule, n_steps: int):
    """DDIM-refine a batch of proposals; returns world positions [B, T, 2].

    Runs on the tape when gradients are enabled so trajectory losses can
    reach the noise predictor.
    """
    ego = np.asarray(ego, dtype=np.float64)
    prep, mask = prepare_conditioning(cond, cfg)
    feat = proposal_features(proposal_xy, ego, cfg)
    B = ego.shape[0]

    def predict(z, t):
        return eps_model(z, np.full(B, t), ego[:, 3], prep, mask, feat, params, cfg)

    x0 = ddim_sample(predict, Tensor(np.asarray(z_init, dtype=np.float64)), schedule, n_steps,
                     cfg.x0_clip)
    delta = rotate_to_world_t(x0 * cfg.scale, ego)
    return delta + anchor_positions(proposal_xy, ego, cfg)


def ddim_refine(proposal: Trajectory, ego: EgoState, conditioning: np.ndarray,
                params: ParamStore, schedule: NoiseSchedule, n_steps: int,
                config: FlowConfig, rng: np.random.Generator) -> Trajectory:
    e = ego.as_array()[None]
    z = rng.standard_normal((1, len(proposal), 2))
    with tc.no_grad():
        xy = refine_batch(proposal.positions[None], e, conditioning[None], z, params, config,
                          schedule, n_steps)
    return Trajectory.from_positions(xy.data[0], ego, proposal.dt)
