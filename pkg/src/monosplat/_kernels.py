"""Single-threaded numba kernels for tile rasterization.

Everything here is deliberately sequential: a fixed tile/pixel/splat iteration
order makes renders and gradient reductions bit-reproducible.  The backward
kernel re-evaluates each splat's alpha with the exact expressions of the
forward kernel, so the reconstructed blending state matches bit for bit.
"""

import math

import numpy as np
from numba import njit

TILE = 16


@njit(cache=True, nogil=True)
def bin_splats(mean2d, radius, width, height):
    """CSR tile lists from depth-sorted splats; per-tile order stays depth order."""
    n = mean2d.shape[0]
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    n_tiles = ntx * nty

    x0 = np.empty(n, np.int64)
    x1 = np.empty(n, np.int64)
    y0 = np.empty(n, np.int64)
    y1 = np.empty(n, np.int64)
    counts = np.zeros(n_tiles + 1, np.int64)
    for i in range(n):
        r = radius[i]
        ax0 = int(math.floor((mean2d[i, 0] - r) / TILE))
        ax1 = int(math.floor((mean2d[i, 0] + r) / TILE))
        ay0 = int(math.floor((mean2d[i, 1] - r) / TILE))
        ay1 = int(math.floor((mean2d[i, 1] + r) / TILE))
        if ax0 < 0:
            ax0 = 0
        if ay0 < 0:
            ay0 = 0
        if ax1 > ntx - 1:
            ax1 = ntx - 1
        if ay1 > nty - 1:
            ay1 = nty - 1
        x0[i], x1[i], y0[i], y1[i] = ax0, ax1, ay0, ay1
        if ax0 > ax1 or ay0 > ay1:
            continue
        for ty in range(ay0, ay1 + 1):
            for tx in range(ax0, ax1 + 1):
                counts[ty * ntx + tx + 1] += 1

    tile_ptr = np.empty(n_tiles + 1, np.int64)
    tile_ptr[0] = 0
    for t in range(n_tiles):
        tile_ptr[t + 1] = tile_ptr[t] + counts[t + 1]

    cursor = tile_ptr[:-1].copy()
    tile_ids = np.empty(tile_ptr[n_tiles], np.int64)
    for i in range(n):
        if x0[i] > x1[i] or y0[i] > y1[i]:
            continue
        for ty in range(y0[i], y1[i] + 1):
            for tx in range(x0[i], x1[i] + 1):
                t = ty * ntx + tx
                tile_ids[cursor[t]] = i
                cursor[t] += 1
    return tile_ptr, tile_ids


@njit(cache=True, nogil=True)
def forward(tile_ptr, tile_ids, mean2d, conic, opacity, color, depth,
            power_thresh, background, width, height, t_min):
    """Front-to-back compositing over depth-sorted tile lists.

    power_thresh[i] = 2 ln(opacity_i / alpha_min): comparing the Mahalanobis
    power against it is the alpha_min skip without evaluating exp.  Returns
    (color, alpha, depth_acc, T_final, n_contrib) where alpha is the term-wise
    sum of blending weights, T_final the remaining transmittance and n_contrib
    the number of tile-list entries consumed per pixel.
    """
    out_color = np.zeros((height, width, 3))
    out_alpha = np.zeros((height, width))
    out_depth = np.zeros((height, width))
    out_t = np.ones((height, width))
    n_contrib = np.zeros((height, width), np.int32)
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE

    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            lo, hi = tile_ptr[t], tile_ptr[t + 1]
            if lo == hi:
                for py in range(ty * TILE, min((ty + 1) * TILE, height)):
                    for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                        out_color[py, px, 0] = background[0]
                        out_color[py, px, 1] = background[1]
                        out_color[py, px, 2] = background[2]
                continue
            for py in range(ty * TILE, min((ty + 1) * TILE, height)):
                for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                    trans = 1.0
                    acc0 = 0.0
                    acc1 = 0.0
                    acc2 = 0.0
                    acc_a = 0.0
                    acc_d = 0.0
                    consumed = 0
                    for k in range(lo, hi):
                        consumed += 1
                        i = tile_ids[k]
                        dx = px - mean2d[i, 0]
                        dy = py - mean2d[i, 1]
                        sigma = (conic[i, 0] * dx * dx
                                 + 2.0 * conic[i, 1] * dx * dy
                                 + conic[i, 2] * dy * dy)
                        if sigma < 0.0 or sigma > power_thresh[i]:
                            continue
                        alpha = opacity[i] * math.exp(-0.5 * sigma)
                        w = alpha * trans
                        acc0 += w * color[i, 0]
                        acc1 += w * color[i, 1]
                        acc2 += w * color[i, 2]
                        acc_a += w
                        acc_d += w * depth[i]
                        trans *= 1.0 - alpha
                        if trans < t_min:
                            break
                    out_color[py, px, 0] = acc0 + trans * background[0]
                    out_color[py, px, 1] = acc1 + trans * background[1]
                    out_color[py, px, 2] = acc2 + trans * background[2]
                    out_alpha[py, px] = acc_a
                    out_depth[py, px] = acc_d
                    out_t[py, px] = trans
                    n_contrib[py, px] = consumed
    return out_color, out_alpha, out_depth, out_t, n_contrib


@njit(cache=True, nogil=True)
def backward(tile_ptr, tile_ids, mean2d, conic, opacity, color,
             t_final, n_contrib, dl_dcolor, background, width, height,
             power_thresh):
    """Reverse compositing: splat-level gradients of a color-image loss.

    Walks each pixel's consumed tile-list span back to front, re-evaluating
    alpha with exactly the forward kernel's expressions.  Outputs per splat:
    d/dcolor, d/dopacity, d/dmean2d and d/dSigma_I (the 2D covariance, packed
    xx, xy, yy as a full symmetric matrix gradient).
    """
    n = mean2d.shape[0]
    g_color = np.zeros((n, 3))
    g_opacity = np.zeros(n)
    g_mean2d = np.zeros((n, 2))
    g_cov2d = np.zeros((n, 3))
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE

    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            lo, hi = tile_ptr[t], tile_ptr[t + 1]
            if lo == hi:
                continue
            for py in range(ty * TILE, min((ty + 1) * TILE, height)):
                for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                    d0 = dl_dcolor[py, px, 0]
                    d1 = dl_dcolor[py, px, 1]
                    d2 = dl_dcolor[py, px, 2]
                    if d0 == 0.0 and d1 == 0.0 and d2 == 0.0:
                        continue
                    trans = t_final[py, px]
                    tail0 = trans * background[0]
                    tail1 = trans * background[1]
                    tail2 = trans * background[2]
                    for k in range(lo + n_contrib[py, px] - 1, lo - 1, -1):
                        i = tile_ids[k]
                        dx = px - mean2d[i, 0]
                        dy = py - mean2d[i, 1]
                        sigma = (conic[i, 0] * dx * dx
                                 + 2.0 * conic[i, 1] * dx * dy
                                 + conic[i, 2] * dy * dy)
                        if sigma < 0.0 or sigma > power_thresh[i]:
                            continue
                        alpha = opacity[i] * math.exp(-0.5 * sigma)
                        t_before = trans / (1.0 - alpha)
                        w = alpha * t_before
                        dl_da = (d0 * (t_before * color[i, 0] - tail0 / (1.0 - alpha))
                                 + d1 * (t_before * color[i, 1] - tail1 / (1.0 - alpha))
                                 + d2 * (t_before * color[i, 2] - tail2 / (1.0 - alpha)))
                        g_color[i, 0] += d0 * w
                        g_color[i, 1] += d1 * w
                        g_color[i, 2] += d2 * w
                        g_opacity[i] += dl_da * alpha / opacity[i]
                        u0 = conic[i, 0] * dx + conic[i, 1] * dy
                        u1 = conic[i, 1] * dx + conic[i, 2] * dy
                        coeff = dl_da * alpha
                        g_mean2d[i, 0] += coeff * u0
                        g_mean2d[i, 1] += coeff * u1
                        g_cov2d[i, 0] += 0.5 * coeff * u0 * u0
                        g_cov2d[i, 1] += 0.5 * coeff * u0 * u1
                        g_cov2d[i, 2] += 0.5 * coeff * u1 * u1
                        tail0 += color[i, 0] * w
                        tail1 += color[i, 1] * w
                        tail2 += color[i, 2] * w
                        trans = t_before
    return g_color, g_opacity, g_mean2d, g_cov2d
