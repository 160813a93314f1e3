"""Feature-map Fourier profiles, depth metrics and the frozen-encoder depth probe."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .config import ProbeConfig, from_dict
from .encoder import Encoder
from .errors import ConfigurationError, DomainError, GeometryError, IntegrityError
from .model import ENCODER_PREFIXES, ModelConfig
from .patch_mask import PatchGrid, patchify, unpatchify
from .synthdata import NormStats, SceneConfig, load_batch

LOG_EPS = 1e-8
PROFILE_POINTS = 17


@dataclass(frozen=True)
class SpectrumProfile:
    freqs: np.ndarray
    rel_log_amp: np.ndarray


@dataclass(frozen=True)
class DepthMetrics:
    rmse: float
    delta1: float


# ---------------------------------------------------------------- Fourier


def tokens_to_grid(tokens, grid: PatchGrid):
    """(..., N, D) raster-ordered tokens -> (..., H/P, W/P, D)."""
    *lead, N, D = tokens.shape
    if N != grid.N:
        raise GeometryError(f"{N} tokens do not fill a {grid.rows}x{grid.cols} patch grid")
    return tokens.reshape(*lead, grid.rows, grid.cols, D)


def amplitude_spectrum(feature_grid: np.ndarray) -> np.ndarray:
    """Per-channel |DFT| of (..., S, S, D) maps, zero frequency shifted to the centre."""
    f = np.fft.fft2(np.asarray(feature_grid, dtype=np.float64), axes=(-3, -2))
    return np.fft.fftshift(np.abs(f), axes=(-3, -2))


def _bilinear_diagonal(img: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Sample img[p, p] at fractional diagonal positions."""
    S = img.shape[0]
    lo = np.clip(np.floor(pos).astype(int), 0, S - 1)
    hi = np.clip(lo + 1, 0, S - 1)
    w = pos - lo
    return (
        (1 - w) ** 2 * img[lo, lo]
        + (1 - w) * w * (img[lo, hi] + img[hi, lo])
        + w**2 * img[hi, hi]
    )


def log_amplitude_profile(feature_grid, points: int = PROFILE_POINTS, eps: float = LOG_EPS) -> SpectrumProfile:
    """Centre-referenced log amplitude along the half diagonal of the 2-D spectrum.

    Accepts a single (S, S, D) map or a batch (B, S, S, D); log amplitudes are
    averaged over channels and samples before sampling. Frequencies run from 0
    at the spectrum centre to pi at the corner.
    """
    g = np.asarray(feature_grid, dtype=np.float64)
    if g.ndim == 3:
        g = g[None]
    if g.ndim != 4 or g.shape[1] != g.shape[2] or g.shape[1] < 2:
        raise GeometryError(f"expected square (S, S, D) feature maps, got {g.shape}")
    S = g.shape[1]
    log_amp = np.log(amplitude_spectrum(g) + eps).mean(axis=(0, 3))
    c = S // 2
    t = np.linspace(0.0, 1.0, points)
    vals = _bilinear_diagonal(log_amp, c * (1.0 - t))
    return SpectrumProfile(freqs=t * np.pi, rel_log_amp=vals - vals[0])


def delta_log_amplitude(profile: SpectrumProfile) -> float:
    """Log amplitude at the boundary (pi) relative to the centre."""
    return float(profile.rel_log_amp[-1])


# ---------------------------------------------------------------- metrics


def rmse(d_p, d_gt) -> float:
    d_p, d_gt = np.asarray(d_p, dtype=np.float64), np.asarray(d_gt, dtype=np.float64)
    if d_p.shape != d_gt.shape:
        raise GeometryError("prediction and ground truth shapes differ")
    valid = d_gt > 0
    return float(np.sqrt(np.mean((d_p[valid] - d_gt[valid]) ** 2)))


def delta1(d_p, d_gt, threshold: float = 1.25) -> float:
    d_p, d_gt = np.asarray(d_p, dtype=np.float64), np.asarray(d_gt, dtype=np.float64)
    if d_p.shape != d_gt.shape:
        raise GeometryError("prediction and ground truth shapes differ")
    if np.any(d_p <= 0) or np.any(d_gt <= 0):
        raise DomainError("delta1 needs strictly positive depths")
    ratio = np.maximum(d_gt / d_p, d_p / d_gt)
    return float(np.mean(ratio < threshold))


# ---------------------------------------------------------------- frozen encoder


class FrozenEncoder(nn.Module):
    """The exported part of the network: image projection, position table, blocks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        g, D = cfg.grid, cfg.encoder.dim
        self.cfg = cfg
        self.image_proj = nn.Linear(g.patch_dim(g.C_i), D)
        self.pos_embed = nn.Parameter(torch.zeros(g.N, D))
        self.encoder = Encoder(cfg.encoder)
        self.requires_grad_(False)

    @torch.no_grad()
    def features(self, image_patches: torch.Tensor, layer: int = -1) -> torch.Tensor:
        tokens = self.image_proj(image_patches) + self.pos_embed
        out, hidden = self.encoder(tokens, return_hidden=True)
        return out if layer < 0 else hidden[layer]


@dataclass
class LoadedEncoder:
    encoder: FrozenEncoder
    stats: NormStats
    scene_cfg: SceneConfig


def load_encoder(path: str | Path) -> LoadedEncoder:
    """Load the encoder tensors from an encoder-only or a full checkpoint."""
    tensors, meta = ckpt.load_tensors(path)
    model_cfg = from_dict(ModelConfig, meta["model_config"])
    enc = FrozenEncoder(model_cfg)
    state = {n: t for n, t in tensors.items() if n.startswith(ENCODER_PREFIXES)}
    own = enc.state_dict()
    if set(state) != set(own):
        raise IntegrityError(f"{path}: encoder tensors missing or extra: {sorted(set(state) ^ set(own))[:4]}")
    dtype = next(iter(state.values())).dtype
    enc = enc.to(dtype)
    enc.load_state_dict(state)
    scene_cfg = from_dict(SceneConfig, meta["scene_config"]) if meta.get("scene_config") else SceneConfig()
    return LoadedEncoder(enc, NormStats.from_dict(meta["norm_stats"]), scene_cfg)


def encode_scenes(enc: LoadedEncoder, seeds, scene_cfg: SceneConfig, layer: int = -1, chunk: int = 64):
    """Unmasked features (S, N, D) and depth patches (S, N, P*P) for scene seeds."""
    grid = enc.encoder.cfg.grid
    dtype = enc.encoder.image_proj.weight.dtype
    feats, targets = [], []
    seeds = list(seeds)
    for i in range(0, len(seeds), chunk):
        images, depths = load_batch(seeds[i : i + chunk], scene_cfg, enc.stats)
        x = patchify(torch.from_numpy(images).to(dtype), grid)
        feats.append(enc.encoder.features(x, layer).double().numpy())
        targets.append(patchify(torch.from_numpy(depths), grid).double().numpy())
    return np.concatenate(feats), np.concatenate(targets)


def fit_ridge(X: np.ndarray, Y: np.ndarray, ridge: float) -> np.ndarray:
    """Least-squares linear head with bias; returns a (D+1, Q) weight matrix."""
    Xb = np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)
    A = Xb.T @ Xb
    A[np.diag_indices_from(A)] += ridge * Xb.shape[0]
    A[-1, -1] -= ridge * Xb.shape[0]  # bias is not shrunk
    return np.linalg.solve(A, Xb.T @ Y)


def probe_depth(
    encoder: str | Path | LoadedEncoder,
    scene_cfg: SceneConfig | None = None,
    probe_cfg: ProbeConfig = ProbeConfig(),
) -> DepthMetrics:
    """Train a one-layer depth head on frozen features and score it on held-out scenes.

    The head maps each unmasked token to its patch's P*P depth pixels and is
    fitted in closed form (ridge regression) on ``probe_cfg.train_seeds``;
    RMSE and delta1 are measured on ``probe_cfg.val_seeds``.
    """
    a, b = probe_cfg.train_seeds, probe_cfg.val_seeds
    if a[0] < b[1] and b[0] < a[1]:
        raise ConfigurationError("probe train and validation seed ranges overlap")
    enc = encoder if isinstance(encoder, LoadedEncoder) else load_encoder(encoder)
    scene_cfg = scene_cfg or enc.scene_cfg
    grid = enc.encoder.cfg.grid
    X, Y = encode_scenes(enc, range(*a), scene_cfg, probe_cfg.layer)
    W = fit_ridge(X.reshape(-1, X.shape[-1]), Y.reshape(-1, Y.shape[-1]), probe_cfg.ridge)
    Xv, Yv = encode_scenes(enc, range(*b), scene_cfg, probe_cfg.layer)
    pred = np.concatenate([Xv, np.ones(Xv.shape[:-1] + (1,))], axis=-1) @ W
    pred = np.clip(pred, probe_cfg.min_depth, 1.0)
    d_p = unpatchify(torch.from_numpy(pred), grid).numpy()
    d_gt = unpatchify(torch.from_numpy(Yv), grid).numpy()
    return DepthMetrics(rmse(d_p, d_gt), delta1(d_p, d_gt))


def feature_profile(enc: LoadedEncoder, seeds, layer: int = -1) -> SpectrumProfile:
    feats, _ = encode_scenes(enc, seeds, enc.scene_cfg, layer)
    return log_amplitude_profile(tokens_to_grid(feats, enc.encoder.cfg.grid))


# ---------------------------------------------------------------- outputs


def write_profile_csv(path: str | Path, profile: SpectrumProfile) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["freq", "rel_log_amp"])
        for fr, v in zip(profile.freqs, profile.rel_log_amp):
            w.writerow([repr(float(fr)), repr(float(v))])


def write_metrics_csv(path: str | Path, metrics: dict[str, float]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, repr(float(v))])


def write_energy_pgm(path: str | Path, feature_grid: np.ndarray) -> None:
    """Binary PGM of per-location feature energy (sum of squares over channels)."""
    e = (np.asarray(feature_grid, dtype=np.float64) ** 2).sum(axis=-1)
    span = e.max() - e.min()
    img = np.zeros_like(e) if span == 0 else (e - e.min()) / span
    data = np.round(img * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (data.shape[1], data.shape[0]))
        f.write(data.tobytes())
