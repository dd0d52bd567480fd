"""Two-stage optimization.

Stage I fits the chain (winner-takes-all trajectory loss) and the scorer.
Stage II freezes the chain and fits the refiner and scorer: diffusion loss on
the proposal closest to the expert, trajectory loss on that proposal's DDIM
refinement, scorer loss on all refined candidates.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .chain import ProposalSet, rollout_batch
from .flow import eps_model, make_target, prepare_conditioning, proposal_features, refine_batch
from .model import Planner, save_planner
from .scenario import Scenario
from .scorer import augment_candidates, candidate_features, scorer_forward, scorer_loss, scorer_targets

log = logging.getLogger(__name__)

LOG_FIELDS = ["stage", "epoch", "step", "lr", "loss_total", "loss_traj", "loss_diff",
              "loss_scorer", "min_ade_train"]


class DivergenceError(FloatingPointError):
    pass


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 10.0
    lambda3: float = 20.0
    lambda4: float = 4.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    batch_size: int = 8
    base_lr: float = 2e-4
    base_lr_stage2: float | None = 2e-3  # None reuses base_lr
    lr_reference_batch: int = 64
    warmup_frac: float = 0.10
    epochs_stage1: int = 25
    epochs_stage2: int = 40
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    refine_steps: int = 4
    scorer_augment: int = 3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup_frac must be in [0, 1)")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)


def lr_at(step: float, total_steps: int, config: TrainConfig) -> float:
    """sqrt(B/64)-scaled base rate, linear warmup then cosine decay to zero."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    peak = config.base_lr * math.sqrt(config.batch_size / config.lr_reference_batch)
    warm = config.warmup_frac * total_steps
    if step < warm:
        return peak * step / warm
    if total_steps == warm:
        return peak
    return peak * 0.5 * (1 + math.cos(math.pi * (step - warm) / (total_steps - warm)))


def _positions(x) -> np.ndarray:
    if isinstance(x, ProposalSet):
        return x.positions
    if hasattr(x, "positions"):
        return x.positions
    return np.asarray(x)[..., :2]


def wta_distance(P: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Summed per-waypoint Euclidean distance; P [..., K, T, 2], E [..., T, 2] -> [..., K]."""
    return np.sqrt(((P - E[..., None, :, :]) ** 2).sum(-1)).sum(-1)


def wta_assign(proposals, expert) -> int:
    """Index of the proposal with the smallest summed L2 distance to the expert (first on ties)."""
    P = _positions(proposals)
    E = _positions(expert)
    if len(P) == 0:
        raise ValueError("wta_assign needs at least one proposal")
    return int(np.argmin(wta_distance(P, E)))


def per_mode_mse(states: tc.Tensor, expert_xy: np.ndarray) -> tc.Tensor:
    """states [B, K, T, >=2] (tensor), expert [B, T, 2] -> MSE per mode [B, K]."""
    d = states[..., :2] - expert_xy[:, None]
    return tc.mean(tc.mean(d * d, axis=-1), axis=-1)


def loss_traj_stage1(states: tc.Tensor, expert_xy: np.ndarray) -> tuple[tc.Tensor, np.ndarray]:
    """WTA loss: mean over the batch of the selected mode's MSE; returns (loss, k*).

    The mode is picked by summed waypoint distance, as in ``wta_assign``.
    """
    per = per_mode_mse(states, expert_xy)
    k = wta_distance(states.data[..., :2], expert_xy).argmin(axis=1)
    return tc.mean(per[np.arange(per.shape[0]), k]), k


def loss_diff(eps: np.ndarray, eps_hat: tc.Tensor) -> tc.Tensor:
    return tc.mse(eps_hat, eps)


def sample_timesteps(rng: np.random.Generator, n: int, n_train_steps: int) -> np.ndarray:
    return rng.integers(1, n_train_steps + 1, size=n)


def _batch_arrays(batch: Sequence[Scenario]):
    tokens = np.stack([s.scene_tokens for s in batch])
    ego = np.stack([s.ego_init.as_array() for s in batch])
    expert = np.stack([s.expert.positions for s in batch])
    return tokens, ego, expert


def _scorer_batch(cands: np.ndarray, batch: Sequence[Scenario], planner: Planner,
                  rng: np.random.Generator, n_aug: int):
    """Candidates [B, C, T, 2] + expert + augmentations -> (features, pairs, targets)."""
    feats, pairs, targets = [], [], []
    for b, s in enumerate(batch):
        ego_xy = np.array([s.ego_init.x, s.ego_init.y])
        extra = augment_candidates(s.expert.positions, ego_xy, rng, n_aug)
        xy = np.concatenate([cands[b], s.expert.positions[None], extra], axis=0)
        f, pr = candidate_features(xy, s, planner.config.scorer)
        feats.append(f)
        pairs.append(pr)
        targets.append([scorer_targets(c, s) for c in xy])
    return np.stack(feats), np.stack(pairs), np.array(targets, dtype=np.float64)


def _scorer_term(cands: np.ndarray, batch, planner: Planner, rng, n_aug: int) -> tc.Tensor:
    tokens = np.stack([s.scene_tokens for s in batch])
    feat, pair, tgt = _scorer_batch(cands, batch, planner, rng, n_aug)
    raw = scorer_forward(feat, pair, tokens, planner.params, planner.config.scorer)
    return scorer_loss(raw, tgt)


def _check(loss: tc.Tensor, step: int) -> None:
    if not np.isfinite(loss.data).all():
        raise DivergenceError(f"non-finite loss at step {step}")


def _apply(planner: Planner, loss: tc.Tensor, names: list[str], lr: float, cfg: TrainConfig) -> None:
    p = planner.params
    p.zero_grads()
    tc.backward(loss)
    if cfg.grad_clip:
        tc.clip_grad_norm(p, cfg.grad_clip, names)
    if lr > 0:
        tc.adamw_step(p, lr, weight_decay=cfg.weight_decay, names=names)


def stage1_step(batch: Sequence[Scenario], planner: Planner, config: TrainConfig,
                lr: float, rng: np.random.Generator, step: int = 0) -> dict:
    ccfg = planner.config.chain
    tokens, ego, expert = _batch_arrays(batch)
    states, _, _ = rollout_batch(tokens, ego, planner.params, ccfg)
    l_traj, _ = loss_traj_stage1(states, expert)
    l_scorer = _scorer_term(states.data[..., :2], batch, planner, rng, config.scorer_augment)
    w1 = config.weights.lambda1
    loss = l_traj + l_scorer * w1
    _check(loss, step)
    names = planner.params.names("chain.") + planner.params.names("scorer.")
    _apply(planner, loss, names, lr, config)
    d = np.hypot(*(states.data[..., :2] - expert[:, None]).transpose(3, 0, 1, 2)).mean(-1)
    return {"loss_total": loss.item(), "loss_traj": l_traj.item(), "loss_diff": 0.0,
            "loss_scorer": l_scorer.item(), "scorer_term": w1 * l_scorer.item(),
            "min_ade_train": float(d.min(axis=1).mean())}


def stage2_step(batch: Sequence[Scenario], planner: Planner, config: TrainConfig,
                lr: float, rng: np.random.Generator, step: int = 0) -> dict:
    pc = planner.config
    fcfg = pc.flow
    schedule = planner.schedule
    tokens, ego, expert = _batch_arrays(batch)
    B, K, T = len(batch), pc.chain.K, pc.chain.T
    with tc.no_grad():
        states, _, _ = rollout_batch(tokens, ego, planner.params, pc.chain)
    props = states.data[..., :2]
    kstar = np.array([wta_assign(props[b], expert[b]) for b in range(B)])
    sel = props[np.arange(B), kstar]
    cond_raw = np.stack([s.semantic_ctx if fcfg.conditioning_source == "semantic_ctx"
                         else s.scene_tokens for s in batch])
    cond, mask = prepare_conditioning(cond_raw, fcfg)

    # diffusion loss on the k* proposal only
    x0 = make_target(expert, sel, ego, fcfg)
    t = sample_timesteps(rng, B, schedule.n_train_steps)
    eps = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bar[t][:, None, None]
    z = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    eps_hat = eps_model(z, t, ego[:, 3], cond, mask, proposal_features(sel, ego, fcfg),
                        planner.params, fcfg)
    l_diff = loss_diff(eps, eps_hat)

    w = config.weights
    loss = l_diff * w.lambda2
    l_traj = l_scorer = tc.Tensor(np.array(0.0))
    # trajectory loss on the refined k* proposal
    if w.lambda3 > 0:
        z_init = rng.standard_normal((B, T, 2))
        refined = refine_batch(sel, ego, cond_raw, z_init, planner.params, fcfg, schedule,
                               config.refine_steps)
        l_traj = tc.mse(refined, expert)
        loss = loss + l_traj * w.lambda3
    # scorer on all refined candidates
    if w.lambda4 > 0:
        with tc.no_grad():
            all_ref = refine_batch(props.reshape(B * K, T, 2), np.repeat(ego, K, axis=0),
                                   np.repeat(cond_raw, K, axis=0),
                                   rng.standard_normal((B * K, T, 2)),
                                   planner.params, fcfg, schedule, config.refine_steps)
        l_scorer = _scorer_term(all_ref.data.reshape(B, K, T, 2), batch, planner, rng,
                                config.scorer_augment)
        loss = loss + l_scorer * w.lambda4
    _check(loss, step)
    names = planner.params.names("flow.") + planner.params.names("scorer.")
    _apply(planner, loss, names, lr, config)
    d = np.hypot(*(props - expert[:, None]).transpose(3, 0, 1, 2)).mean(-1)
    return {"loss_total": loss.item(), "loss_traj": l_traj.item(), "loss_diff": l_diff.item(),
            "loss_scorer": l_scorer.item(), "min_ade_train": float(d.min(axis=1).mean())}


def train_stage(stage: int, train_set: Sequence[Scenario], planner: Planner, config: TrainConfig,
                out_dir=None, epochs: int | None = None, ckpt_extra: dict | None = None) -> dict:
    """Run a full stage; appends to ``train_log.csv`` and checkpoints each epoch."""
    step_fn = stage1_step if stage == 1 else stage2_step
    if stage == 2 and config.base_lr_stage2 is not None:
        config = dataclasses.replace(config, base_lr=config.base_lr_stage2)
    epochs = epochs if epochs is not None else (config.epochs_stage1 if stage == 1
                                                 else config.epochs_stage2)
    B = config.batch_size
    n_batches = max(1, len(train_set) // B)
    total = epochs * n_batches
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "train_log.csv"
        new = not path.exists()
        fh = open(path, "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new:
            writer.writeheader()
    t0 = time.perf_counter()
    last = {}
    try:
        it = 0
        for epoch in range(epochs):
            order = np.random.default_rng([config.seed, stage, epoch]).permutation(len(train_set))
            for b in range(n_batches):
                batch = [train_set[i] for i in order[b * B:(b + 1) * B]]
                lr = lr_at(it + 1, total + 1, config)
                rng = np.random.default_rng([config.seed, stage, epoch, b])
                last = step_fn(batch, planner, config, lr, rng, step=it)
                if writer is not None:
                    writer.writerow({"stage": stage, "epoch": epoch, "step": it, "lr": repr(lr),
                                     **{k: repr(last[k]) for k in LOG_FIELDS[4:]}})
                it += 1
            log.info("stage %d epoch %d loss %.4f min_ade %.3f (%.0fs)", stage, epoch,
                     last["loss_total"], last["min_ade_train"], time.perf_counter() - t0)
            if out is not None:
                fh.flush()
                save_planner(out / f"stage{stage}.ckpt", planner,
                             {"stage": stage, "epoch": epoch, **(ckpt_extra or {})})
    finally:
        if fh is not None:
            fh.close()
    return {"wall_time": time.perf_counter() - t0, "steps": total, **last}
