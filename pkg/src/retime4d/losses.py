"""Photometric and flow losses plus primitive regularizers."""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import ContractViolation

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gauss_window(dtype) -> torch.Tensor:
    r = SSIM_WINDOW // 2
    x = torch.arange(-r, r + 1, dtype=torch.float64)
    g = torch.exp(-(x * x) / (2 * SSIM_SIGMA**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).to(dtype)


def ssim_map(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Per-window SSIM of [H, W, C] images, valid windows only: [H-10, W-10, C]."""
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    h, w = a.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ContractViolation(f"image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c = a.shape[2]
    win = _gauss_window(a.dtype).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)
    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]

    def filt(z):
        return F.conv2d(z, win, groups=c)

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return s[0].permute(1, 2, 0)


def ssim(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean SSIM over windows whose center lies in ``mask`` (all windows if None)."""
    s = ssim_map(a, b).mean(dim=-1)
    if mask is None:
        return s.mean()
    r = SSIM_WINDOW // 2
    m = mask[r:-r, r:-r].to(torch.bool)
    if not m.any():
        raise ContractViolation("mask selects no SSIM window centers")
    return s[m].mean()


def rgb_loss(rendered: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None,
             lambda_dssim: float = 0.2) -> torch.Tensor:
    """``(1 - lambda) * L1 + lambda * (1 - SSIM)``, optionally restricted to a mask."""
    if rendered.shape != target.shape:
        raise ContractViolation(f"shape mismatch {tuple(rendered.shape)} vs {tuple(target.shape)}")
    diff = (rendered - target).abs()
    if mask is None:
        l1 = diff.mean()
    else:
        m = mask.to(torch.bool)
        l1 = diff[m].mean() if m.any() else diff.sum() * 0
    if lambda_dssim == 0:
        return l1
    return (1 - lambda_dssim) * l1 + lambda_dssim * (1 - ssim(rendered, target, mask))


def flow_loss(rendered_flow: torch.Tensor, gt_flow: torch.Tensor, alpha: torch.Tensor,
              min_alpha: float = 0.5) -> torch.Tensor:
    """Mean L1 over both flow channels of pixels with ``alpha > min_alpha``."""
    if rendered_flow.shape != gt_flow.shape or rendered_flow.shape[:2] != alpha.shape:
        raise ContractViolation(
            f"shape mismatch: flow {tuple(rendered_flow.shape)}, gt {tuple(gt_flow.shape)}, "
            f"alpha {tuple(alpha.shape)}")
    m = alpha.detach() > min_alpha
    if not m.any():
        return rendered_flow.sum() * 0
    return (rendered_flow - gt_flow.to(rendered_flow.dtype)).abs()[m].mean()


def regularizers(scene, opacity_weight: float = 0.01, scale_weight: float = 0.1) -> torch.Tensor:
    """Opacity and scale penalties pushing primitives to be faint and compact."""
    if len(scene) == 0:
        return torch.zeros((), dtype=scene.mu.dtype)
    return (opacity_weight * torch.sigmoid(scene.opacity_logit).mean()
            + scale_weight * torch.exp(scene.log_scale).mean())

