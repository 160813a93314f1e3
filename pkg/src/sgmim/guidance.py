"""Structured-knowledge branch: shallow MLP extraction and cross-attention fusion."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .encoder import LayerNorm, init_linear, multi_head_attention
from .errors import ConfigurationError, GeometryError
from .numerics import LN_EPS, gelu


@dataclass
class StructuredFeatures:
    features: torch.Tensor  # (K, D) or (B, K, D)
    source_indices: torch.Tensor  # (K,) or (B, K), strictly increasing


class StructuredExtractor(nn.Module):
    """Per-token MLP D -> 2D -> D with GELU, followed by layer norm."""

    def __init__(self, dim: int, hidden_ratio: int = 2, eps: float = LN_EPS):
        super().__init__()
        self.fc1 = init_linear(nn.Linear(dim, hidden_ratio * dim))
        self.fc2 = init_linear(nn.Linear(hidden_ratio * dim, dim))
        self.norm = LayerNorm(dim, eps)

    def forward(self, x):
        return self.norm(self.fc2(gelu(self.fc1(x))))


class CrossAttentionFusion(nn.Module):
    """I_SF = Concat(head_1..head_h) W^O + I_F with queries from I_F, keys/values from S_F.

    The per-head maps W^Q_i etc. are the column blocks of one D x D matrix.
    W^O starts at zero, so the module is the identity on I_F at init.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.wq = init_linear(nn.Linear(dim, dim, bias=False))
        self.wk = init_linear(nn.Linear(dim, dim, bias=False))
        self.wv = init_linear(nn.Linear(dim, dim, bias=False))
        self.wo = nn.Linear(dim, dim, bias=False)
        nn.init.zeros_(self.wo.weight)

    def forward(self, i_f: torch.Tensor, s_f: torch.Tensor, return_attn: bool = False):
        if i_f.shape[-1] != s_f.shape[-1]:
            raise GeometryError("I_F and S_F widths differ")
        if s_f.shape[-2] == 0:
            raise ConfigurationError("cross-attention needs at least one structured token")
        heads_out, attn = multi_head_attention(self.wq(i_f), self.wk(s_f), self.wv(s_f), self.heads)
        i_sf = self.wo(heads_out) + i_f
        return (i_sf, attn) if return_attn else i_sf


def _batched(fn, *xs):
    if xs[0].dim() == 2:
        out = fn(*(x.unsqueeze(0) for x in xs))
        return out[0]
    return fn(*xs)


def extract_structured_features(
    visible: torch.Tensor, extractor: StructuredExtractor, source_indices: torch.Tensor | None = None
) -> StructuredFeatures:
    if visible.shape[-2] < 1:
        raise ConfigurationError("no structured-visible embeddings to extract from")
    if source_indices is None:
        source_indices = torch.arange(visible.shape[-2]).expand(visible.shape[:-1])
    return StructuredFeatures(extractor(visible), source_indices)


def fuse(i_f: torch.Tensor, s_f: torch.Tensor, fusion: CrossAttentionFusion) -> torch.Tensor:
    return _batched(fusion, i_f, s_f)
