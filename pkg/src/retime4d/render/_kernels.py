"""Numba kernels for tile-based alpha compositing of 2D Gaussians.

Pixel ``(col, row)`` has its center at ``(col + 0.5, row + 0.5)``. A
Gaussian contributes to pixels inside its 3-sigma ellipse only, so tile
binning is a pure acceleration structure and never changes the result.
"""
import math

import numpy as np
from numba import njit, prange

ALPHA_MAX = 0.999
T_MIN = 1e-4
# -0.5 * 3^2: the 3-sigma ellipse
POWER_CUTOFF = -4.5


@njit(cache=True)
def _tile_rect(mx, my, r, width, height, tile):
    c0 = max(0, int(math.ceil(mx - r - 0.5)))
    c1 = min(width - 1, int(math.floor(mx + r - 0.5)))
    r0 = max(0, int(math.ceil(my - r - 0.5)))
    r1 = min(height - 1, int(math.floor(my + r - 0.5)))
    if c0 > c1 or r0 > r1:
        return 0, -1, 0, -1
    return c0 // tile, c1 // tile, r0 // tile, r1 // tile


@njit(cache=True)
def bin_tiles(means2d, radii, order, width, height, tile):
    """Per-tile Gaussian lists, each in the order given by ``order``.

    Returns ``(offsets, lists)``; tile ``k`` owns ``lists[offsets[k]:offsets[k+1]]``.
    """
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for g in order:
        tx0, tx1, ty0, ty1 = _tile_rect(means2d[g, 0], means2d[g, 1], radii[g], width, height, tile)
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    cursor = offsets[:-1].copy()
    lists = np.empty(offsets[-1], dtype=np.int64)
    for g in order:
        tx0, tx1, ty0, ty1 = _tile_rect(means2d[g, 0], means2d[g, 1], radii[g], width, height, tile)
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                k = ty * tiles_x + tx
                lists[cursor[k]] = g
                cursor[k] += 1
    return offsets, lists


@njit(cache=True)
def _power(conics, g, dx, dy):
    return -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy


@njit(parallel=True, cache=True)
def rasterize_forward(means2d, conics, opac, feats, offsets, lists, width, height, tile,
                      out_feat, out_T, out_last):
    tiles_x = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    n_ch = feats.shape[1]
    for k in prange(n_tiles):
        tx = k % tiles_x
        ty = k // tiles_x
        start = offsets[k]
        end = offsets[k + 1]
        acc = np.zeros(n_ch)
        for row in range(ty * tile, min(height, (ty + 1) * tile)):
            py = row + 0.5
            for col in range(tx * tile, min(width, (tx + 1) * tile)):
                px = col + 0.5
                T = 1.0
                last = start
                acc[:] = 0.0
                for j in range(start, end):
                    g = lists[j]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    power = _power(conics, g, dx, dy)
                    if power > 0.0 or power < POWER_CUTOFF:
                        continue
                    alpha = min(ALPHA_MAX, opac[g] * math.exp(power))
                    test_T = T * (1.0 - alpha)
                    if test_T < T_MIN:
                        break
                    w = alpha * T
                    for c in range(n_ch):
                        acc[c] += w * feats[g, c]
                    T = test_T
                    last = j + 1
                for c in range(n_ch):
                    out_feat[row, col, c] = acc[c]
                out_T[row, col] = T
                out_last[row, col] = last


@njit(parallel=True, cache=True)
def rasterize_backward(means2d, conics, opac, feats, offsets, lists, width, height, tile,
                       out_T, out_last, grad_feat, grad_alpha, n_geo,
                       pair_mean, pair_conic, pair_opac, pair_feat):
    """Accumulate per-(tile, Gaussian) gradients into the ``pair_*`` slots.

    Only the first ``n_geo`` feature channels push gradients into alpha
    (and thus into means, conics and opacities); the remaining channels
    receive feature gradients only.
    """
    tiles_x = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    n_ch = feats.shape[1]
    for k in prange(n_tiles):
        tx = k % tiles_x
        ty = k // tiles_x
        start = offsets[k]
        rec = np.zeros(n_ch)
        last_color = np.zeros(n_ch)
        for row in range(ty * tile, min(height, (ty + 1) * tile)):
            py = row + 0.5
            for col in range(tx * tile, min(width, (tx + 1) * tile)):
                px = col + 0.5
                T_final = out_T[row, col]
                T = T_final
                d_alpha_out = grad_alpha[row, col]
                rec[:] = 0.0
                last_color[:] = 0.0
                last_alpha = 0.0
                for j in range(out_last[row, col] - 1, start - 1, -1):
                    g = lists[j]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    power = _power(conics, g, dx, dy)
                    if power > 0.0 or power < POWER_CUTOFF:
                        continue
                    gauss = math.exp(power)
                    raw = opac[g] * gauss
                    alpha = min(ALPHA_MAX, raw)
                    T = T / (1.0 - alpha)
                    w = alpha * T
                    d_alpha = 0.0
                    for c in range(n_ch):
                        gc = grad_feat[row, col, c]
                        pair_feat[j, c] += w * gc
                        rec[c] = last_alpha * last_color[c] + (1.0 - last_alpha) * rec[c]
                        last_color[c] = feats[g, c]
                        if c < n_geo:
                            d_alpha += (feats[g, c] - rec[c]) * gc
                    d_alpha *= T
                    d_alpha += d_alpha_out * T_final / (1.0 - alpha)
                    last_alpha = alpha
                    if raw >= ALPHA_MAX:
                        continue
                    pair_opac[j] += gauss * d_alpha
                    d_power = raw * d_alpha
                    pair_mean[j, 0] += d_power * (conics[g, 0] * dx + conics[g, 1] * dy)
                    pair_mean[j, 1] += d_power * (conics[g, 2] * dy + conics[g, 1] * dx)
                    pair_conic[j, 0] += d_power * (-0.5 * dx * dx)
                    pair_conic[j, 1] += d_power * (-dx * dy)
                    pair_conic[j, 2] += d_power * (-0.5 * dy * dy)


@njit(cache=True)
def reduce_pairs(lists, pair_mean, pair_conic, pair_opac, pair_feat,
                 g_mean, g_conic, g_opac, g_feat):
    """Sum pair slots into per-Gaussian gradients in a fixed order."""
    for j in range(lists.shape[0]):
        g = lists[j]
        g_mean[g, 0] += pair_mean[j, 0]
        g_mean[g, 1] += pair_mean[j, 1]
        for c in range(3):
            g_conic[g, c] += pair_conic[j, c]
        g_opac[g] += pair_opac[j]
        for c in range(pair_feat.shape[1]):
            g_feat[g, c] += pair_feat[j, c]
