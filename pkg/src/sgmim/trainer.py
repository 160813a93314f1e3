"""Deterministic pre-training loop, AdamW, cosine schedule and checkpoint I/O."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import TrainConfig, from_dict, to_dict
from .errors import ConfigurationError, IntegrityError
from .model import ENCODER_PREFIXES, ModelConfig, SGMIM
from .numerics import NumericError
from .objective import LossReport
from .patch_mask import PatchGrid, patchify, sample_mask_pair
from .synthdata import NormStats, SceneConfig, calibration_stats, load_batch

logger = logging.getLogger(__name__)

_TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0


def adamw_update(
    param: torch.Tensor,
    grad: torch.Tensor,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> tuple[torch.Tensor, AdamState]:
    """One AdamW step; returns new tensors and leaves the inputs untouched.

    Weight decay is decoupled: ``p <- p - lr*wd*p`` is applied separately
    from the bias-corrected moment step ``lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    if param.shape != grad.shape:
        raise ConfigurationError("parameter and gradient shapes differ")
    b1, b2 = betas
    t = state.step + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    p = param - lr * weight_decay * param
    p = p - lr * m_hat / (torch.sqrt(v_hat) + eps)
    return p, AdamState(m, v, t)


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    progress = min(1.0, (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps))
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1 + math.cos(math.pi * progress))


def decays(name: str, p: torch.Tensor) -> bool:
    """Weight decay applies to projection matrices only."""
    return p.dim() >= 2 and name != "pos_embed"


def init_opt_state(model: torch.nn.Module) -> dict[str, AdamState]:
    return {n: AdamState(torch.zeros_like(p), torch.zeros_like(p)) for n, p in model.named_parameters()}


def clip_grad_norm(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(math.fsum(float((g.double() ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g.mul_(scale)
    return total


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    images: torch.Tensor  # (B, N, P*P*3) normalized image patches
    depths: torch.Tensor  # (B, N, P*P) depth patches
    seeds: list[int] = field(default_factory=list)
    masks: tuple[torch.Tensor, torch.Tensor] | None = None  # pinned (m_i, m_s); None = fresh per step


def make_batch(images: np.ndarray, depths: np.ndarray, grid: PatchGrid, dtype=torch.float32, seeds=()) -> Batch:
    img = patchify(torch.from_numpy(np.ascontiguousarray(images)).to(dtype), grid)
    dep = patchify(torch.from_numpy(np.ascontiguousarray(depths)).to(dtype), grid)
    return Batch(img, dep, list(seeds))


def batch_seeds(cfg: TrainConfig, step: int) -> list[int]:
    idx = [step * cfg.batch_size + i for i in range(cfg.batch_size)]
    if cfg.data_pool:
        idx = [i % cfg.data_pool for i in idx]
    return [cfg.data_seed_start + i for i in idx]


def step_masks(cfg: TrainConfig, step: int, batch_size: int, N: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Fresh mask pair per sample per step, a pure function of (seed, step, sample)."""
    pairs = [
        sample_mask_pair(N, cfg.mask_ratio, np.random.SeedSequence([cfg.seed, step, i]), cfg.masking_strategy)
        for i in range(batch_size)
    ]
    m_i = torch.from_numpy(np.stack([p.image for p in pairs]).astype(np.int64))
    m_s = torch.from_numpy(np.stack([p.structured for p in pairs]).astype(np.int64))
    return m_i, m_s


# ---------------------------------------------------------------- training


def build_model(model_cfg: ModelConfig, seed: int, dtype: str = "float32") -> SGMIM:
    torch.manual_seed(seed)
    return SGMIM(model_cfg).to(_TORCH_DTYPES[dtype])


def loss_and_grads(model: SGMIM, batch: Batch, m_i, m_s, cfg: TrainConfig, guidance: bool = True):
    model.zero_grad(set_to_none=True)
    out = model(batch.images, batch.depths, m_i, m_s, cfg.loss_weights, guidance=guidance)
    out.L_total.backward()
    grads = {
        n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in model.named_parameters()
    }
    return out, grads


def train_step(
    model: SGMIM,
    batch: Batch,
    opt_state: dict[str, AdamState],
    cfg: TrainConfig,
    step: int,
    guidance: bool = True,
) -> LossReport:
    """Forward, backward and one AdamW update in place; returns the pre-update losses."""
    N = model.cfg.grid.N
    if batch.masks is not None:
        m_i, m_s = batch.masks
    else:
        m_i, m_s = step_masks(cfg, step, batch.images.shape[0], N)
    out, grads = loss_and_grads(model, batch, m_i, m_s, cfg, guidance)
    if not torch.isfinite(out.L_total):
        raise NumericError(f"non-finite loss at step {step}")
    clip_grad_norm(grads, cfg.grad_clip)
    lr = cosine_lr(step + 1, cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            wd = cfg.weight_decay if decays(name, p) else 0.0
            new_p, opt_state[name] = adamw_update(p, grads[name], opt_state[name], lr, cfg.betas, wd)
            p.copy_(new_p)
    Q_i, Q_s = batch.images.shape[-1], batch.depths.shape[-1]
    counts = (int(m_i.sum()) * Q_i, int(m_s.sum()) * Q_s)
    return LossReport(out.L_I.item(), out.L_S.item(), out.L_total.item(), counts)


@dataclass
class TrainState:
    model: SGMIM
    opt_state: dict[str, AdamState]
    cfg: TrainConfig
    scene_cfg: SceneConfig
    stats: NormStats
    step: int = 0
    history: list[LossReport] = field(default_factory=list)


def new_state(
    cfg: TrainConfig,
    model_cfg: ModelConfig = ModelConfig(),
    scene_cfg: SceneConfig = SceneConfig(),
    stats: NormStats | None = None,
) -> TrainState:
    if (model_cfg.grid.H, model_cfg.grid.W) != (scene_cfg.H, scene_cfg.W):
        raise ConfigurationError("model grid and scene size disagree")
    model = build_model(model_cfg, cfg.seed, cfg.dtype)
    stats = stats or calibration_stats(scene_cfg)
    return TrainState(model, init_opt_state(model), cfg, scene_cfg, stats)


def stream_batch(state: TrainState, step: int) -> Batch:
    seeds = batch_seeds(state.cfg, step)
    images, depths = load_batch(seeds, state.scene_cfg, state.stats)
    return make_batch(images, depths, state.model.cfg.grid, _TORCH_DTYPES[state.cfg.dtype], seeds)


def train(
    state: TrainState,
    until: int | None = None,
    fixed_batch: Batch | None = None,
    log_path: str | Path | None = None,
    guidance: bool = True,
    on_step: Callable[[int, LossReport], None] | None = None,
) -> TrainState:
    """Advance ``state`` to step ``until`` (default: cfg.steps).

    Batches stream from consecutive scene seeds unless ``fixed_batch`` is
    given. Each step appends ``step,lr,L_I,L_S,L_total`` to ``log_path``.
    """
    until = state.cfg.steps if until is None else until
    log = None
    if log_path is not None:
        new = not Path(log_path).exists() or state.step == 0
        log = open(log_path, "w" if state.step == 0 else "a", newline="")
        writer = csv.writer(log)
        if new:
            writer.writerow(["step", "lr", "L_I", "L_S", "L_total"])
    try:
        while state.step < until:
            t = state.step
            batch = fixed_batch if fixed_batch is not None else stream_batch(state, t)
            report = train_step(state.model, batch, state.opt_state, state.cfg, t, guidance)
            state.history.append(report)
            state.step = t + 1
            if log is not None:
                writer.writerow([t, repr(cosine_lr(t + 1, state.cfg)), repr(report.L_I), repr(report.L_S), repr(report.L_total)])
            if on_step is not None:
                on_step(t, report)
            if t % 100 == 0:
                logger.info("step %d  L_I %.4f  L_S %.4f  L %.4f", t, report.L_I, report.L_S, report.L_total)
    finally:
        if log is not None:
            log.close()
    return state


# ---------------------------------------------------------------- persistence


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    tensors = {n: p.detach() for n, p in state.model.named_parameters()}
    for n, s in state.opt_state.items():
        tensors[f"opt.m.{n}"] = s.m
        tensors[f"opt.v.{n}"] = s.v
    meta = {
        "kind": "full",
        "step": state.step,
        "opt_step": {n: s.step for n, s in state.opt_state.items()},
        "train_config": to_dict(state.cfg),
        "model_config": to_dict(state.model.cfg),
        "scene_config": to_dict(state.scene_cfg),
        "norm_stats": state.stats.to_dict(),
        # masks and batches are pure functions of (seed, step); this is the whole RNG state
        "rng": {"seed": state.cfg.seed, "next_step": state.step},
    }
    ckpt.save_tensors(path, tensors, meta)


def load_checkpoint(path: str | Path) -> TrainState:
    tensors, meta = ckpt.load_tensors(path)
    if meta.get("kind") != "full":
        raise IntegrityError(f"{path}: not a full training checkpoint")
    cfg = from_dict(TrainConfig, meta["train_config"])
    model_cfg = from_dict(ModelConfig, meta["model_config"])
    scene_cfg = from_dict(SceneConfig, meta["scene_config"])
    model = SGMIM(model_cfg).to(_TORCH_DTYPES[cfg.dtype])
    names = [n for n, _ in model.named_parameters()]
    expected = set(names) | {f"opt.{k}.{n}" for n in names for k in ("m", "v")}
    if set(tensors) != expected:
        raise IntegrityError(f"{path}: tensor set does not match the model ({sorted(set(tensors) ^ expected)[:4]})")
    with torch.no_grad():
        for n, p in model.named_parameters():
            if tuple(tensors[n].shape) != tuple(p.shape):
                raise IntegrityError(f"{path}: {n} has shape {tuple(tensors[n].shape)}")
            p.copy_(tensors[n])
    opt = {n: AdamState(tensors[f"opt.m.{n}"].clone(), tensors[f"opt.v.{n}"].clone(), meta["opt_step"][n]) for n in names}
    return TrainState(model, opt, cfg, scene_cfg, NormStats.from_dict(meta["norm_stats"]), meta["step"])


def export_encoder(checkpoint_path: str | Path, path: str | Path) -> None:
    """Write an encoder-only checkpoint (blocks, image projection, position table)."""
    tensors, meta = ckpt.load_tensors(checkpoint_path)
    keep = {n: t for n, t in tensors.items() if n.startswith(ENCODER_PREFIXES)}
    required = ("image_proj.weight", "image_proj.bias", "pos_embed", "encoder.norm.weight")
    missing = [n for n in required if n not in keep]
    if missing or not any(n.startswith("encoder.blocks.") for n in keep):
        raise IntegrityError(f"{checkpoint_path}: missing encoder tensors {missing}")
    out_meta = {
        "kind": "encoder",
        "step": meta.get("step"),
        "model_config": meta["model_config"],
        "scene_config": meta.get("scene_config"),
        "norm_stats": meta["norm_stats"],
    }
    ckpt.save_tensors(path, keep, out_meta)


def pretrain(
    cfg: TrainConfig,
    model_cfg: ModelConfig = ModelConfig(),
    scene_cfg: SceneConfig = SceneConfig(),
    output_dir: str | Path | None = None,
) -> TrainState:
    """Full run; with ``output_dir`` writes checkpoint.sgm and train_log.csv there."""
    state = new_state(cfg, model_cfg, scene_cfg)
    log_path = None
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        log_path = Path(output_dir) / "train_log.csv"
    train(state, log_path=log_path)
    if output_dir is not None:
        save_checkpoint(state, Path(output_dir) / "checkpoint.sgm")
    return state


def replace(cfg: TrainConfig, **kw) -> TrainConfig:
    return dataclasses.replace(cfg, **kw)
