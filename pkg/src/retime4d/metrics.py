"""Evaluation metrics: PSNR and windowed SSIM, both optionally foreground-masked.

Metrics run in float64 on 8-bit quantized images so numbers match what an
external tool would compute from the written PNGs.
"""
from __future__ import annotations

import math

import numpy as np
import torch

from .errors import ContractViolation
from .losses import ssim as _ssim

PSNR_CAP = 99.0


def quantize(img) -> np.ndarray:
    """Round to 8 bits and return float64 in [0, 1]."""
    a = np.asarray(img, dtype=np.float64)
    return np.round(np.clip(a, 0.0, 1.0) * 255.0) / 255.0


def _check(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")


def psnr(a, b, mask=None) -> float:
    """PSNR in dB over ``mask`` pixels (all pixels when None), capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check(a, b)
    err = (a - b) ** 2
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if not m.any():
            raise ContractViolation("empty mask")
        err = err[m]
    mse = float(err.mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(a, b, mask=None) -> float:
    """11x11 Gaussian-window SSIM (sigma 1.5), averaged over windows centered in ``mask``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    m = None if mask is None else torch.from_numpy(np.asarray(mask, dtype=bool))
    return float(_ssim(torch.from_numpy(a), torch.from_numpy(b), m))


def edge_band(mask, width: int = 2) -> np.ndarray:
    """Pixels within ``width`` px of the mask boundary (dilation minus erosion)."""
    from scipy import ndimage

    m = np.asarray(mask, dtype=bool)
    st = ndimage.generate_binary_structure(2, 2)
    return ndimage.binary_dilation(m, st, iterations=width) & ~ndimage.binary_erosion(m, st, iterations=width)


def error_heatmap(pred, gt) -> np.ndarray:
    """Per-pixel mean absolute RGB error, [H, W] in [0, 1]."""
    return np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)).mean(axis=-1)
