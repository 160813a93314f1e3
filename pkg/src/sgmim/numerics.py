"""Tensor primitives and finite-difference gradient checking.

Reverse-mode differentiation is provided by torch autograd over a dynamically
recorded graph. This module pins down the handful of primitives whose exact
numerical behaviour the rest of the package relies on, and supplies the
central-difference oracle used to verify every differentiable path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import torch
import torch.nn.functional as F

LN_EPS = 1e-6


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    eps: float
    checked: int = 0


def check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


def gelu(x: torch.Tensor) -> torch.Tensor:
    # exact (erf) form; smooth, so finite differences agree closely
    return F.gelu(x)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Max-subtracted softmax along ``dim``."""
    z = x - x.amax(dim=dim, keepdim=True).detach()
    e = z.exp()
    return e / e.sum(dim=dim, keepdim=True)


def layer_norm(
    x: torch.Tensor,
    weight: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
    eps: float = LN_EPS,
) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


class _Abs(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x.abs()

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * torch.sign(x)  # sign(0) = 0


def abs_(x: torch.Tensor) -> torch.Tensor:
    """|x| with subgradient 0 at 0."""
    return _Abs.apply(x)


def gather_rows(x: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """Select rows of a (B, N, D) tensor by a (B, K) index."""
    return torch.gather(x, 1, index.unsqueeze(-1).expand(-1, -1, x.shape[-1]))


def scatter_rows(base: torch.Tensor, index: torch.Tensor, rows: torch.Tensor) -> torch.Tensor:
    """Out-of-place write of ``rows`` (B, K, D) into ``base`` (B, N, D) at ``index``."""
    return base.scatter(1, index.unsqueeze(-1).expand(-1, -1, base.shape[-1]), rows)


# a term is only treated as kinked if its stencil gap is visible above this
# fraction of the summed term changes; smaller gaps are round-off
KINK_FLOOR = 1e-7


def _evaluate(scalar_fn, flat: torch.Tensor, i: int, x: float, where: str) -> torch.Tensor:
    orig = flat[i].item()
    flat[i] = x
    f = scalar_fn().reshape(-1)
    flat[i] = orig
    if not torch.isfinite(f).all():
        raise NumericError(f"non-finite value perturbing {where}")
    return f


def _term_derivative(scalar_fn, flat, i, f0, h, where) -> float:
    """Central difference of the summed terms; one-sided where a term has a kink."""
    x = flat[i].item()
    f_plus = _evaluate(scalar_fn, flat, i, x + h, where)
    f_minus = _evaluate(scalar_fn, flat, i, x - h, where)
    diff = (f_plus - f_minus) / (2 * h)
    if f0.numel() > 1:
        fwd, bwd = f_plus - f0, f0 - f_minus
        gap = (fwd - bwd).abs()
        floor = KINK_FLOOR * (f_plus - f_minus).abs().sum()
        bad = (gap > 1e-2 * (fwd.abs() + bwd.abs())) & (gap > floor)
        if bad.any():
            # |r| has at most one zero near x, so one of the two sides is smooth
            f_2plus = _evaluate(scalar_fn, flat, i, x + 2 * h, where)
            f_2minus = _evaluate(scalar_fn, flat, i, x - 2 * h, where)
            curv_plus = (f_2plus - 2 * f_plus + f0).abs()
            curv_minus = (f0 - 2 * f_minus + f_2minus).abs()
            right = (-3 * f0 + 4 * f_plus - f_2plus) / (2 * h)
            left = (3 * f0 - 4 * f_minus + f_2minus) / (2 * h)
            one_sided = torch.where(curv_plus <= curv_minus, right, left)
            diff[bad] = one_sided[bad]
    return math.fsum(diff.tolist())


def grad_check(
    scalar_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-6,
    max_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients to central finite differences.

    ``scalar_fn`` is re-evaluated after in-place perturbation of each checked
    element, so ``params`` must be the leaf tensors it closes over. All params
    should be float64. When ``max_per_param`` is set, that many elements per
    tensor are sampled (seeded) instead of checking every entry.

    ``scalar_fn`` may return a 1-D tensor of additive terms instead of a
    scalar; the function value is their sum, and the finite difference is
    taken term by term and accumulated with ``math.fsum``. This keeps the
    round-off of the final reduction out of f(x+eps) - f(x-eps).

    With terms, a term whose forward and backward differences disagree has a
    kink (|r| crossing zero) inside the stencil. Those terms alone take a
    second-order one-sided difference from the side without the kink, so the
    check measures the derivative at x rather than a secant across it.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise TypeError(f"grad_check needs float64 tensors, {name} is {p.dtype}")
        p.grad = None

    leaves = list(params.values())
    with torch.enable_grad():
        for p in leaves:
            p.requires_grad_(True)
        out = scalar_fn()
        if out.dim() > 1:
            raise ValueError("scalar_fn must return a scalar or a 1-D tensor of terms")
        check_finite(out.detach(), "scalar_fn output")
        grads = torch.autograd.grad(out.sum(), leaves, allow_unused=True)
    f0 = out.detach().reshape(-1)

    gen = torch.Generator().manual_seed(seed)
    worst, worst_name, checked = 0.0, "", 0
    with torch.no_grad():
        for (name, p), g in zip(params.items(), grads):
            analytic = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            if max_per_param is None or flat.numel() <= max_per_param:
                idx = range(flat.numel())
            else:
                idx = torch.randperm(flat.numel(), generator=gen)[:max_per_param].tolist()
            a_flat = analytic.reshape(-1)
            for i in idx:
                numeric = _term_derivative(scalar_fn, flat, i, f0, eps, f"{name}[{i}]")
                a = a_flat[i].item()
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                checked += 1
                if checked == 1 or rel > worst:
                    worst, worst_name = rel, name
    return GradCheckReport(max_rel_error=worst, worst_param=worst_name, eps=eps, checked=checked)
