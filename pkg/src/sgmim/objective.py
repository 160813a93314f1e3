"""Prediction heads and the weighted masked-L1 objective."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, GeometryError
from .numerics import abs_


@dataclass(frozen=True)
class LossWeights:
    lambda_I: float = 1.0
    lambda_S: float = 1.0

    def __post_init__(self):
        if self.lambda_I < 0 or self.lambda_S < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.lambda_I == 0 and self.lambda_S == 0:
            raise ConfigurationError("at least one loss weight must be positive")

    @property
    def label(self) -> str:
        return f"{self.lambda_I:g}/{self.lambda_S:g}"


@dataclass(frozen=True)
class LossReport:
    L_I: float
    L_S: float
    L_total: float
    masked_pixel_counts: tuple[int, int] = (0, 0)


def reconstruct_pixels(i_f: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    if i_f.shape[-1] != head.in_features:
        raise GeometryError("latent width does not match head")
    return head(i_f)


def predict_structured(i_sf: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    return reconstruct_pixels(i_sf, head)


def masked_l1(pred: torch.Tensor, target: torch.Tensor, patch_mask: torch.Tensor) -> torch.Tensor:
    """Mean |pred - target| over the pixels of masked patches.

    Shapes (N, Q) with mask (N,), or (B, N, Q) with mask (B, N); the batched
    form averages the per-sample losses.
    """
    if pred.shape != target.shape:
        raise GeometryError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    m = torch.as_tensor(patch_mask).to(pred.dtype)
    if m.shape != pred.shape[:-1]:
        raise GeometryError("mask does not match patch count")
    count = m.sum(dim=-1)
    if bool((count == 0).any()):
        raise ConfigurationError("masked L1 over an empty mask")
    per_patch = abs_(pred - target).sum(dim=-1)
    per_sample = (per_patch * m).sum(dim=-1) / (count * pred.shape[-1])
    return per_sample.mean() if per_sample.dim() else per_sample


def masked_l1_terms(pred: torch.Tensor, target: torch.Tensor, patch_mask: torch.Tensor) -> torch.Tensor:
    """Per-entry contributions whose sum equals ``masked_l1`` (for gradient checks)."""
    m = torch.as_tensor(patch_mask).to(pred.dtype)
    count = m.sum(dim=-1, keepdim=True)
    terms = abs_(pred - target) * (m / (count * pred.shape[-1])).unsqueeze(-1)
    if terms.dim() == 3:
        terms = terms / terms.shape[0]
    return terms.reshape(-1)


def weighted_total(L_I: torch.Tensor, L_S: torch.Tensor, w: LossWeights) -> torch.Tensor:
    return w.lambda_I * L_I + w.lambda_S * L_S


def total_loss(L_I, L_S, w: LossWeights, masked_pixel_counts: tuple[int, int] = (0, 0)) -> LossReport:
    L_I, L_S = float(L_I), float(L_S)
    return LossReport(L_I, L_S, w.lambda_I * L_I + w.lambda_S * L_S, masked_pixel_counts)
