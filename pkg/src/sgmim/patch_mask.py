"""Patchification, patch embedding and complementary mask sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, GeometryError

SELECTIVE = "selective_complement"
RANDOM_BOTH = "random_both"
STRATEGIES = (SELECTIVE, RANDOM_BOTH)


@dataclass(frozen=True)
class PatchGrid:
    H: int = 64
    W: int = 64
    P: int = 8
    C_i: int = 3
    C_s: int = 1

    def __post_init__(self):
        if self.P <= 0 or self.H % self.P or self.W % self.P:
            raise GeometryError(f"{self.H}x{self.W} is not divisible into {self.P}px patches")

    @property
    def rows(self) -> int:
        return self.H // self.P

    @property
    def cols(self) -> int:
        return self.W // self.P

    @property
    def N(self) -> int:
        return self.rows * self.cols

    def patch_dim(self, channels: int) -> int:
        return self.P * self.P * channels


def patchify(pixels: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """(..., H, W, C) -> (..., N, P*P*C).

    Patches are raster ordered; inside a patch pixels are row-major with the
    channel index varying fastest.
    """
    *lead, H, W, C = pixels.shape
    if (H, W) != (grid.H, grid.W):
        raise GeometryError(f"pixel map {H}x{W} does not match grid {grid.H}x{grid.W}")
    P = grid.P
    x = pixels.reshape(*lead, grid.rows, P, grid.cols, P, C)
    k = len(lead)
    x = x.permute(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return x.reshape(*lead, grid.N, P * P * C)


def unpatchify(patches: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    *lead, N, Q = patches.shape
    P = grid.P
    if N != grid.N or Q % (P * P):
        raise GeometryError(f"patch matrix {N}x{Q} does not match grid with N={grid.N}, P={P}")
    C = Q // (P * P)
    x = patches.reshape(*lead, grid.rows, grid.cols, P, P, C)
    k = len(lead)
    x = x.permute(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return x.reshape(*lead, grid.H, grid.W, C)


def sincos_pos_table(rows: int, cols: int, dim: int, base: float = 10000.0) -> torch.Tensor:
    """2-D sine-cosine table (rows*cols, dim) in raster order.

    The first half of each row encodes the patch row, the second half the
    column. Used as the starting value of the learnable position table.
    """
    if dim % 4:
        raise GeometryError(f"sin-cos table needs a width divisible by 4, got {dim}")
    q = dim // 4
    omega = 1.0 / base ** (np.arange(q, dtype=np.float64) / q)

    def axis(n):
        ang = np.arange(n, dtype=np.float64)[:, None] * omega[None]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    r = np.repeat(axis(rows), cols, axis=0)
    c = np.tile(axis(cols), (rows, 1))
    return torch.from_numpy(np.concatenate([r, c], axis=1)).float()


def embed_patches(patches: torch.Tensor, proj: torch.nn.Linear, pos_table: torch.Tensor) -> torch.Tensor:
    """tokens = patches @ W + b + pos_table."""
    if patches.shape[-1] != proj.in_features:
        raise GeometryError(f"patch width {patches.shape[-1]} != projection input {proj.in_features}")
    if pos_table.shape != (patches.shape[-2], proj.out_features):
        raise GeometryError(
            f"position table {tuple(pos_table.shape)} does not fit "
            f"{patches.shape[-2]} patches of width {proj.out_features}"
        )
    return proj(patches) + pos_table


def mask_count(N: int, ratio: float) -> int:
    """Number of masked patches: round-half-up of ratio*N, must leave both sides non-empty."""
    if not 0.0 < ratio < 1.0:
        raise ConfigurationError(f"mask ratio must lie in (0, 1), got {ratio}")
    k = int(math.floor(ratio * N + 0.5))
    if not 0 < k < N:
        raise ConfigurationError(f"ratio {ratio} masks {k} of {N} patches")
    return k


def sample_image_mask(N: int, ratio: float, seed: int | np.random.SeedSequence) -> np.ndarray:
    """Binary length-N mask with exactly ``mask_count(N, ratio)`` ones.

    Positions come from a seeded Fisher-Yates permutation (numpy's
    ``Generator.permutation``), so equal arguments give equal masks.
    """
    k = mask_count(N, ratio)
    rng = np.random.default_rng(seed)
    mask = np.zeros(N, dtype=np.uint8)
    mask[rng.permutation(N)[:k]] = 1
    return mask


def complement_mask(m_i: np.ndarray) -> np.ndarray:
    m_i = np.asarray(m_i)
    if not np.isin(m_i, (0, 1)).all():
        raise ConfigurationError("mask must be binary")
    return (1 - m_i).astype(m_i.dtype)


@dataclass(frozen=True)
class MaskPair:
    image: np.ndarray
    structured: np.ndarray
    ratio: float

    @property
    def complementary(self) -> bool:
        return bool(np.all(self.image + self.structured == 1))


def sample_mask_pair(
    N: int, ratio: float, seed: int | np.random.SeedSequence, strategy: str = SELECTIVE
) -> MaskPair:
    """Image mask plus structured mask under the given strategy.

    ``selective_complement`` hides the structured map exactly where the image
    is visible. ``random_both`` draws an independent mask of the same ratio for
    the structured map, so the two may overlap.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    img_seed, struct_seed = ss.spawn(2)
    m_i = sample_image_mask(N, ratio, img_seed)
    if strategy == SELECTIVE:
        m_s = complement_mask(m_i)
    elif strategy == RANDOM_BOTH:
        m_s = sample_image_mask(N, ratio, struct_seed)
    else:
        raise ConfigurationError(f"unknown masking strategy {strategy!r}")
    return MaskPair(m_i, m_s, ratio)


def apply_mask_tokens(
    tokens: torch.Tensor, m_i: torch.Tensor, mask_token: torch.Tensor, pos_table: torch.Tensor
) -> torch.Tensor:
    """Replace masked positions by ``mask_token + pos_table[j]``; others pass through."""
    if mask_token.shape[-1] != tokens.shape[-1]:
        raise GeometryError("mask token width differs from token width")
    sel = m_i.to(torch.bool).unsqueeze(-1)
    return torch.where(sel, mask_token + pos_table, tokens)


def gather_visible_structured(tokens: torch.Tensor, m_s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Rows where the structured map is visible (m_s == 0), with their indices.

    Accepts (N, D) with an (N,) mask or (B, N, D) with a (B, N) mask. In the
    batched case every sample must expose the same count K.
    """
    m_s = torch.as_tensor(m_s)
    single = tokens.dim() == 2
    if single:
        tokens, m_s = tokens.unsqueeze(0), m_s.unsqueeze(0)
    visible = m_s == 0
    counts = visible.sum(dim=1)
    K = int(counts[0])
    if K == 0:
        raise ConfigurationError("no structured-visible patches")
    if not bool((counts == K).all()):
        raise ConfigurationError("structured-visible counts differ across the batch")
    # stable sort puts visible positions first, in increasing index order
    index = torch.argsort((~visible).to(torch.int8), dim=1, stable=True)[:, :K]
    rows = torch.gather(tokens, 1, index.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))
    if single:
        return rows[0], index[0]
    return rows, index
