"""Candidate scoring head and the argmax selection rule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import geometry, metrics
from . import tensorcore as tc
from .chain import TOKEN_SCALE
from .kinematics import Trajectory
from .scenario import TOK_POS, TOK_RADIUS, TOK_VEL, Scenario, token_mask
from .tensorcore import ParamStore, Tensor

PAIR_FEATURES = 2


@dataclass
class ScorerConfig:
    hidden_dim: int = 64
    T: int = 8
    dt: float = 0.5
    d_tok: int = 16

    @property
    def traj_features(self) -> int:
        return 4 * self.T + 1


@dataclass(frozen=True)
class ScoreVector:
    collision_logit: float  # logit of being collision-free
    drivable_logit: float  # logit of staying in the drivable corridor
    progress_estimate: float

    @property
    def aggregate(self) -> float:
        return aggregate(self.collision_logit, self.drivable_logit, self.progress_estimate)


def _sig(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def aggregate(collision_logit: float, drivable_logit: float, progress: float) -> float:
    return _sig(collision_logit) * _sig(drivable_logit) * (0.5 + 0.5 * progress)


def select_best(scores: Sequence) -> int:
    """Index of the highest aggregate; ties go to the lowest index."""
    if len(scores) == 0:
        raise ValueError("select_best needs at least one score")
    vals = [s.aggregate if isinstance(s, ScoreVector) else float(s) for s in scores]
    best = 0
    for i, v in enumerate(vals):
        if v > vals[best]:
            best = i
    return best


# ------------------------------------------------------------------ features


def candidate_features(xy: np.ndarray, scenario: Scenario, cfg: ScorerConfig):
    """Per-candidate inputs for one scenario.

    xy [C, T, 2] world positions. Returns (trajectory features [C, F],
    candidate-token pair features [C, N, 2]): ego-frame waypoints, speeds,
    corridor offsets and progress; and for each token the closest-approach
    clearance and its time fraction.
    """
    xy = np.asarray(xy, dtype=np.float64)
    C, T, _ = xy.shape
    e = scenario.ego_init
    c, s = math.cos(e.heading), math.sin(e.heading)
    d = xy - np.array([e.x, e.y])
    local = np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], -1)
    pts = np.concatenate([np.zeros((C, 1, 2)), local], axis=1)
    speed = np.hypot(*np.diff(pts, axis=1).transpose(2, 0, 1)) / cfg.dt
    dist, along, lat = geometry.project_to_polyline(xy.reshape(-1, 2), scenario.corridor.centerline)
    hw = scenario.corridor.half_width
    lat = (lat / hw).reshape(C, T)
    _, s0, _ = geometry.project_to_polyline(np.array([[e.x, e.y]]), scenario.corridor.centerline)
    prog = (along.reshape(C, T)[:, -1:] - s0[0]) / 60.0
    feat = np.concatenate([local.reshape(C, -1) / 20.0, speed / 10.0, lat, prog], axis=1)

    tok = scenario.scene_tokens
    # token positions are ego-relative; compare in the ego frame
    tpos = tok[:, TOK_POS]
    tvel = tok[:, TOK_VEL]
    rad = tok[:, TOK_RADIUS]
    f = np.arange(10) / 10
    dense = (pts[:, :-1, None, :] + f[None, None, :, None]
             * np.diff(pts, axis=1)[:, :, None, :]).reshape(C, -1, 2)
    dense = np.concatenate([dense, pts[:, -1:]], axis=1)
    times = np.arange(dense.shape[1]) * (cfg.dt / 10)
    obs = tpos[None, :, :] + times[:, None, None] * tvel[None]
    gap = np.hypot(*(dense[:, :, None, :] - obs[None]).transpose(3, 0, 1, 2))
    gap = gap - rad[None, None, :] - geometry.EGO_RADIUS
    idx = gap.argmin(axis=1)
    clearance = np.clip(gap.min(axis=1) / 5.0, -1.0, 3.0)
    pair = np.stack([clearance, idx / dense.shape[1]], axis=-1)
    pair[:, ~token_mask(tok)] = 0.0
    return feat, pair


# ------------------------------------------------------------------ model


def _dense(store, rng, name, n_in, n_out, gain=1.0):
    store.add(name + ".w", rng.standard_normal((n_in, n_out)) * gain / math.sqrt(n_in))
    store.add(name + ".b", np.zeros(n_out))


def init_scorer(config: ScorerConfig, store: ParamStore, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng([seed, 300])
    H = config.hidden_dim
    _dense(store, rng, "scorer.traj.0", config.traj_features, H)
    _dense(store, rng, "scorer.traj.1", H, H)
    _dense(store, rng, "scorer.tok.0", config.d_tok + PAIR_FEATURES, H)
    _dense(store, rng, "scorer.tok.1", H, H)
    store.add("scorer.attn.q", rng.standard_normal((H, H)) / math.sqrt(H))
    store.add("scorer.attn.k", rng.standard_normal((H, H)) / math.sqrt(H))
    store.add("scorer.attn.v", rng.standard_normal((H, H)) / math.sqrt(H))
    _dense(store, rng, "scorer.head.0", 2 * H, H)
    _dense(store, rng, "scorer.head.1", H, 3, gain=0.1)
    return store


def _lin(x, p, name):
    return tc.linear(x, p[name + ".w"], p[name + ".b"])


def scorer_forward(feat: np.ndarray, pair: np.ndarray, tokens: np.ndarray, p: ParamStore,
                   cfg: ScorerConfig) -> Tensor:
    """feat [B, C, F], pair [B, C, N, 2], tokens [B, N, D] -> raw outputs [B, C, 3]."""
    B, C = feat.shape[:2]
    N = tokens.shape[1]
    h = tc.gelu(_lin(feat, p, "scorer.traj.0"))
    h = h + tc.gelu(_lin(h, p, "scorer.traj.1"))
    tok = np.broadcast_to((tokens * TOKEN_SCALE)[:, None], (B, C, N, tokens.shape[-1]))
    t = tc.gelu(_lin(np.concatenate([tok, pair], axis=-1), p, "scorer.tok.0"))
    t = t + tc.gelu(_lin(t, p, "scorer.tok.1"))
    q = tc.reshape(tc.matmul(h, p["scorer.attn.q"]), (B, C, 1, -1))
    mask = token_mask(tokens)[:, None, None, :]
    ctx = tc.attention(q, tc.matmul(t, p["scorer.attn.k"]), tc.matmul(t, p["scorer.attn.v"]), mask)
    ctx = tc.reshape(ctx, (B, C, -1))
    z = tc.gelu(_lin(tc.concat([h, ctx], axis=-1), p, "scorer.head.0"))
    return _lin(z, p, "scorer.head.1")


def to_score_vectors(raw: np.ndarray) -> list[ScoreVector]:
    return [ScoreVector(float(r[0]), float(r[1]), _sig(float(r[2]))) for r in raw]


def score_candidates(candidates: Sequence[Trajectory], scenario: Scenario, params: ParamStore,
                     config: ScorerConfig) -> list[ScoreVector]:
    if len(candidates) == 0:
        raise ValueError("score_candidates needs at least one candidate")
    xy = np.stack([c.positions for c in candidates])
    feat, pair = candidate_features(xy, scenario, config)
    with tc.no_grad():
        raw = scorer_forward(feat[None], pair[None], scenario.scene_tokens[None], params, config)
    return to_score_vectors(raw.data[0])


def scorer_targets(candidate, scenario: Scenario) -> tuple[int, int, float]:
    """(collides, off_drivable, progress) from the metric geometry."""
    return (int(metrics.no_collision(candidate, scenario) == 0.0),
            int(metrics.drivable_compliance(candidate, scenario) == 0.0),
            metrics.ego_progress(candidate, scenario))


def scorer_loss(raw: Tensor, targets: np.ndarray) -> Tensor:
    """Equal-weight sum of two BCE terms and the progress squared error.

    targets [..., 3] hold (collides, off_drivable, progress).
    """
    col = tc.bce_with_logits(raw[..., 0], 1.0 - targets[..., 0])
    drv = tc.bce_with_logits(raw[..., 1], 1.0 - targets[..., 1])
    prog = tc.mse(tc.sigmoid(raw[..., 2]), targets[..., 2])
    return col + drv + prog


# ------------------------------------------------------------------ candidate perturbations


def lateral_bump(xy: np.ndarray, ego_xy: np.ndarray, amplitude: float, center: float,
                 width: float) -> np.ndarray:
    """Shift waypoints sideways by a Gaussian bump over the step index."""
    pts = np.vstack([ego_xy[None], xy])
    d = np.gradient(pts, axis=0)[1:]
    n = np.linalg.norm(d, axis=1, keepdims=True)
    tang = np.where(n > 1e-6, d / np.maximum(n, 1e-6), np.array([1.0, 0.0]))
    normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    w = amplitude * np.exp(-0.5 * ((np.arange(len(xy)) - center) / width) ** 2)
    return xy + w[:, None] * normal


def augment_candidates(expert_xy: np.ndarray, ego_xy: np.ndarray, rng: np.random.Generator,
                       n: int) -> np.ndarray:
    """Random lateral and longitudinal perturbations of the expert for scorer supervision."""
    T = len(expert_xy)
    out = []
    for _ in range(n):
        xy = lateral_bump(expert_xy, ego_xy, float(rng.uniform(-5, 5)),
                          float(rng.uniform(0, T - 1)), float(rng.uniform(1.0, 4.0)))
        speed = float(rng.uniform(0.6, 1.25))
        xy = ego_xy + (xy - ego_xy) * speed
        out.append(xy)
    return np.array(out).reshape(n, T, 2)
