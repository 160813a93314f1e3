"""ViT-style pre-norm transformer encoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError
from .numerics import LN_EPS, NumericError, gelu, layer_norm, softmax


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    eps: float = LN_EPS

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError("encoder depth must be >= 1")
        if self.dim % self.heads:
            raise ConfigurationError(f"width {self.dim} not divisible by {self.heads} heads")


def trunc_normal_(t: torch.Tensor, std: float = 0.02) -> torch.Tensor:
    return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


def init_linear(m: nn.Linear, std: float = 0.02) -> nn.Linear:
    trunc_normal_(m.weight, std)
    if m.bias is not None:
        nn.init.zeros_(m.bias)
    return m


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = LN_EPS):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


def multi_head_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention over already-projected (B, N, D) inputs.

    Returns the concatenated head outputs (B, Nq, D) and the attention
    weights (B, heads, Nq, Nk).
    """
    B, Nq, D = q.shape
    Nk = k.shape[1]
    hd = D // heads
    q = q.reshape(B, Nq, heads, hd).transpose(1, 2)
    k = k.reshape(B, Nk, heads, hd).transpose(1, 2)
    v = v.reshape(B, Nk, heads, hd).transpose(1, 2)
    attn = softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
    out = (attn @ v).transpose(1, 2).reshape(B, Nq, D)
    return out, attn


class SelfAttention(nn.Module):
    """Pre-norm multi-head self-attention with its residual connection."""

    def __init__(self, dim: int, heads: int, eps: float = LN_EPS):
        super().__init__()
        self.heads = heads
        self.norm = LayerNorm(dim, eps)
        # no key bias: it shifts every logit of a row equally and has zero gradient
        self.qkv = init_linear(nn.Linear(dim, 3 * dim, bias=False))
        self.q_bias = nn.Parameter(torch.zeros(dim))
        self.v_bias = nn.Parameter(torch.zeros(dim))
        self.proj = init_linear(nn.Linear(dim, dim))

    def forward(self, x, return_attn: bool = False):
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=-1)
        q, v = q + self.q_bias, v + self.v_bias
        out, attn = multi_head_attention(q, k, v, self.heads)
        y = x + self.proj(out)
        return (y, attn) if return_attn else y


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = init_linear(nn.Linear(dim, hidden))
        self.fc2 = init_linear(nn.Linear(hidden, dim))

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.attn = SelfAttention(cfg.dim, cfg.heads, cfg.eps)
        self.norm2 = LayerNorm(cfg.dim, cfg.eps)
        self.mlp = Mlp(cfg.dim, int(cfg.dim * cfg.mlp_ratio))

    def forward(self, x):
        x = self.attn(x)
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.norm = LayerNorm(cfg.dim, cfg.eps)

    def forward(self, x: torch.Tensor, return_hidden: bool = False):
        """Run all blocks then the final norm.

        With ``return_hidden`` also returns the list of per-block outputs
        (before the final norm).
        """
        hidden = []
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activation after encoder block {i}")
            hidden.append(x)
        out = self.norm(x)
        return (out, hidden) if return_hidden else out


def self_attention(x: torch.Tensor, layer: SelfAttention) -> torch.Tensor:
    if x.dim() == 2:
        return layer(x.unsqueeze(0))[0]
    return layer(x)


def encode(tokens: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    """Image latent I_F for a (B, N, D) or (N, D) token sequence."""
    if tokens.shape[-1] != encoder.cfg.dim:
        raise ConfigurationError(f"token width {tokens.shape[-1]} != encoder width {encoder.cfg.dim}")
    if tokens.dim() == 2:
        return encoder(tokens.unsqueeze(0))[0]
    return encoder(tokens)
