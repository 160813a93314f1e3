"""Shared fixtures for the test suite."""
from __future__ import annotations

import math

import numpy as np
import torch

from sgmim.analysis import LOG_EPS
from sgmim.encoder import EncoderConfig
from sgmim.model import SGMIM, ModelConfig
from sgmim.patch_mask import PatchGrid, sample_mask_pair

SMALL = ModelConfig(grid=PatchGrid(H=16, W=16, P=4), encoder=EncoderConfig(depth=2, dim=16, heads=2))


def check_init(model: torch.nn.Module, seed: int = 1, scale: float = 1.0) -> torch.nn.Module:
    """Fan-in scaled random init used only for gradient checks.

    The training init (std 0.02, zero W^O, zero biases) leaves many gradients
    near the finite-difference noise floor; this one gives every parameter an
    O(1) derivative, including the fusion output map.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.dim() == 2 and name != "pos_embed":
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale / np.sqrt(p.shape[1]))
            elif "norm" in name and name.endswith("weight"):
                p.copy_(1 + 0.1 * scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
            else:
                p.copy_(0.1 * scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


def random_masks(B: int, N: int, ratio: float = 0.6, offset: int = 0, strategy: str = "selective_complement"):
    pairs = [sample_mask_pair(N, ratio, offset + i, strategy) for i in range(B)]
    m_i = torch.from_numpy(np.stack([p.image for p in pairs]).astype(np.int64))
    m_s = torch.from_numpy(np.stack([p.structured for p in pairs]).astype(np.int64))
    return m_i, m_s


def random_batch(cfg: ModelConfig, B: int = 2, seed: int = 0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    grid = cfg.grid
    img = torch.randn(B, grid.N, grid.patch_dim(grid.C_i), generator=g, dtype=dtype)
    dep = torch.rand(B, grid.N, grid.patch_dim(grid.C_s), generator=g, dtype=dtype)
    return img, dep


def model64(cfg: ModelConfig = ModelConfig(), seed: int = 0) -> SGMIM:
    torch.manual_seed(seed)
    return SGMIM(cfg).double()


def _twiddle(k: int, S: int) -> tuple[float, float]:
    """(cos, sin) of 2*pi*k/S with exact quarter-turn reduction (cos(pi/2) is 0, not 6e-17)."""
    q, rem = divmod(4 * k, S)
    theta = math.pi / 2 * rem / S
    c, s = math.cos(theta), math.sin(theta)
    for _ in range(q % 4):
        c, s = -s, c
    return c, s


def oracle_profile(grid: np.ndarray, points: int = 17, eps: float = LOG_EPS):
    """Direct-summation DFT, then the same centre-to-corner diagonal read-out."""
    S, _, D = grid.shape
    c = S // 2
    # twiddles from an integer phase table; with fsum this keeps empty bins at
    # ~1e-16, far below eps, so log(|F| + eps) is not dominated by round-off
    cos_t, sin_t = zip(*(_twiddle(k, S) for k in range(S)))
    log_amp = np.zeros((S, S))
    for a in range(S):
        for b in range(S):
            ka, kb = a - c, b - c  # shifted index -> signed frequency
            total = 0.0
            for ch in range(D):
                re, im = [], []
                for r in range(S):
                    for col in range(S):
                        k = (ka * r + kb * col) % S
                        re.append(grid[r, col, ch] * cos_t[k])
                        im.append(-grid[r, col, ch] * sin_t[k])
                total += math.log(math.hypot(math.fsum(re), math.fsum(im)) + eps)
            log_amp[a, b] = total / D

    def at(p):
        i = min(int(math.floor(p)), S - 1)
        j = min(i + 1, S - 1)
        w = p - i
        return ((1 - w) * (1 - w) * log_amp[i, i] + (1 - w) * w * (log_amp[i, j] + log_amp[j, i])
                + w * w * log_amp[j, j])

    vals = np.array([at(c * (1 - k / (points - 1))) for k in range(points)])
    return np.linspace(0, math.pi, points), vals - vals[0]


# PASS/FAIL lines collected by the acceptance suite, printed at session end
ACCEPTANCE_LINES: list[str] = []


def report(criterion: int | str, ok: bool, detail: str) -> str:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line
