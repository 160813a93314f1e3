"""Full pre-training network: image branch, structured branch and both heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .encoder import Encoder, EncoderConfig, init_linear, trunc_normal_
from .guidance import CrossAttentionFusion, StructuredExtractor
from .objective import LossWeights, masked_l1, masked_l1_terms, predict_structured, reconstruct_pixels, weighted_total
from .patch_mask import PatchGrid, apply_mask_tokens, embed_patches, gather_visible_structured, sincos_pos_table

# Parameter-name prefixes that make up the exported encoder.
ENCODER_PREFIXES = ("encoder.", "image_proj.", "pos_embed")


@dataclass(frozen=True)
class ModelConfig:
    grid: PatchGrid = field(default_factory=PatchGrid)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    extractor_ratio: int = 2


@dataclass
class ForwardOutput:
    L_I: torch.Tensor
    L_S: torch.Tensor
    L_total: torch.Tensor
    image_pred: torch.Tensor
    depth_pred: torch.Tensor | None
    i_f: torch.Tensor


class SGMIM(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        g, D = cfg.grid, cfg.encoder.dim
        self.image_proj = init_linear(nn.Linear(g.patch_dim(g.C_i), D))
        self.depth_proj = init_linear(nn.Linear(g.patch_dim(g.C_s), D))
        # learnable, but starts from a 2-D sin-cos table so locality is available from step 0
        self.pos_embed = nn.Parameter(sincos_pos_table(g.rows, g.cols, D))
        self.mask_token = nn.Parameter(trunc_normal_(torch.empty(D)))
        self.encoder = Encoder(cfg.encoder)
        self.extractor = StructuredExtractor(D, cfg.extractor_ratio, cfg.encoder.eps)
        self.fusion = CrossAttentionFusion(D, cfg.encoder.heads)
        self.image_head = init_linear(nn.Linear(D, g.patch_dim(g.C_i)))
        self.depth_head = init_linear(nn.Linear(D, g.patch_dim(g.C_s)))

    def encode_image(self, image_patches: torch.Tensor, m_i: torch.Tensor | None = None, return_hidden=False):
        tokens = embed_patches(image_patches, self.image_proj, self.pos_embed)
        if m_i is not None:
            tokens = apply_mask_tokens(tokens, m_i, self.mask_token, self.pos_embed)
        return self.encoder(tokens, return_hidden=return_hidden)

    def forward(
        self,
        image_patches: torch.Tensor,
        depth_patches: torch.Tensor,
        m_i: torch.Tensor,
        m_s: torch.Tensor,
        weights: LossWeights = LossWeights(),
        guidance: bool = True,
        fusion: bool = True,
    ) -> ForwardOutput:
        """Compute both losses for a batch.

        ``guidance=False`` drops the structured branch entirely (plain masked
        image modeling). ``fusion=False`` keeps the structured head but feeds it
        I_F directly instead of I_SF.
        """
        i_f = self.encode_image(image_patches, m_i)
        image_pred = reconstruct_pixels(i_f, self.image_head)
        L_I = masked_l1(image_pred, image_patches, m_i)
        if not guidance:
            return ForwardOutput(L_I, torch.zeros_like(L_I), weights.lambda_I * L_I, image_pred, None, i_f)

        s_tokens = embed_patches(depth_patches, self.depth_proj, self.pos_embed)
        visible, _ = gather_visible_structured(s_tokens, m_s)
        s_f = self.extractor(visible)
        i_sf = self.fusion(i_f, s_f) if fusion else i_f
        depth_pred = predict_structured(i_sf, self.depth_head)
        L_S = masked_l1(depth_pred, depth_patches, m_s)
        return ForwardOutput(L_I, L_S, weighted_total(L_I, L_S, weights), image_pred, depth_pred, i_f)

    def guidance_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.split(".")[0] in ("depth_proj", "extractor", "fusion", "depth_head")]


def loss_terms(model: SGMIM, image_patches, depth_patches, m_i, m_s, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """L_total as a 1-D vector of additive per-pixel terms (sums to ``forward(...).L_total``).

    Gradient checks difference these term by term, which keeps the round-off
    of the final reduction out of the finite-difference quotient.
    """
    out = model(image_patches, depth_patches, m_i, m_s, weights)
    t_i = weights.lambda_I * masked_l1_terms(out.image_pred, image_patches, m_i)
    t_s = weights.lambda_S * masked_l1_terms(out.depth_pred, depth_patches, m_s)
    return torch.cat([t_i, t_s])
