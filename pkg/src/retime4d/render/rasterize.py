"""Differentiable front-to-back compositing of projected Gaussians."""
from __future__ import annotations

import numpy as np
import torch

from . import _kernels

TILE_SIZE = 16


def _np(x: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(x.detach().cpu().numpy())


class _RasterizeFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means2d, conics, opacities, features, radii, depths, width, height, n_geo):
        m, cn, op, ft = _np(means2d), _np(conics), _np(opacities), _np(features)
        r = np.ascontiguousarray(radii, dtype=np.float64)
        order = np.argsort(np.asarray(depths), kind="stable")
        offsets, lists = _kernels.bin_tiles(m, r, order, width, height, TILE_SIZE)
        dtype = ft.dtype
        img = np.zeros((height, width, ft.shape[1]), dtype=dtype)
        t_final = np.ones((height, width), dtype=dtype)
        last = np.zeros((height, width), dtype=np.int64)
        _kernels.rasterize_forward(m, cn, op, ft, offsets, lists, width, height, TILE_SIZE,
                                   img, t_final, last)
        ctx.save_for_backward(means2d, conics, opacities, features)
        ctx.state = (m, cn, op, ft, offsets, lists, width, height, t_final, last, n_geo)
        return torch.from_numpy(img), torch.from_numpy(1.0 - t_final)

    @staticmethod
    def backward(ctx, grad_img, grad_alpha):
        m, cn, op, ft, offsets, lists, width, height, t_final, last, n_geo = ctx.state
        dtype = ft.dtype
        n, k = ft.shape
        p = lists.shape[0]
        pair_mean = np.zeros((p, 2), dtype=dtype)
        pair_conic = np.zeros((p, 3), dtype=dtype)
        pair_opac = np.zeros(p, dtype=dtype)
        pair_feat = np.zeros((p, k), dtype=dtype)
        _kernels.rasterize_backward(
            m, cn, op, ft, offsets, lists, width, height, TILE_SIZE, t_final, last,
            _np(grad_img).astype(dtype, copy=False), _np(grad_alpha).astype(dtype, copy=False),
            n_geo, pair_mean, pair_conic, pair_opac, pair_feat,
        )
        g_mean = np.zeros((n, 2), dtype=dtype)
        g_conic = np.zeros((n, 3), dtype=dtype)
        g_opac = np.zeros(n, dtype=dtype)
        g_feat = np.zeros((n, k), dtype=dtype)
        _kernels.reduce_pairs(lists, pair_mean, pair_conic, pair_opac, pair_feat,
                              g_mean, g_conic, g_opac, g_feat)
        return (torch.from_numpy(g_mean), torch.from_numpy(g_conic), torch.from_numpy(g_opac),
                torch.from_numpy(g_feat), None, None, None, None, None)


def rasterize(means2d, conics, opacities, features, radii, depths, width: int, height: int,
              n_geo: int | None = None):
    """Alpha-composite Gaussians front to back.

    Args:
        means2d: [N, 2] pixel-space centers.
        conics: [N, 3] inverse 2D covariance entries ``(a, b, c)``.
        opacities: [N] peak opacities (before the 0.999 cap).
        features: [N, K] per-Gaussian feature vectors (colors, flows, ...).
        radii: [N] 3-sigma pixel radii (array, no gradient).
        depths: [N] sort keys (array, no gradient); ties break by index.
        n_geo: number of leading feature channels whose loss gradient reaches
            the geometry (means, conics, opacities). Defaults to all.

    Returns:
        (image [H, W, K], alpha [H, W]); background is zero.
    """
    k = features.shape[1]
    if means2d.shape[0] == 0:
        z = features.new_zeros((height, width, k))
        return z + features.sum() * 0, features.new_zeros((height, width))
    return _RasterizeFn.apply(means2d, conics, opacities, features, np.asarray(radii),
                              np.asarray(depths), width, height, k if n_geo is None else n_geo)
