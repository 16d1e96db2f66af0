"""Numba kernels for tile-based splat compositing.

All per-pixel loops follow the same accumulation order so that the image
kernels, the fragment collector and the list-level helpers agree bit for bit.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

TILE = 16
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4
# exp(POWER_SKIP) < ALPHA_MIN, so such fragments can skip the exp
POWER_SKIP = -5.55

# per-entry gradient slots
G_MEAN = 0      # 2
G_CONIC = 2     # 3
G_OPAC = 5
G_COLOR = 6     # 3
G_DEPTH = 9
G_NORMAL = 10   # 3
G_DIST = 13
G_TAU = 14
G_WIDTH = 15


@njit(cache=True)
def bin_tiles(mean2d, radius, width, height, tile, opac):
    """CSR lists of Gaussian ids per tile, preserving input (depth) order.

    ``radius`` is the 3-sigma footprint; it is shrunk to where the peak
    opacity falls below the alpha cutoff, which never drops a fragment.
    """
    tx = (width + tile - 1) // tile
    ty = (height + tile - 1) // tile
    n = mean2d.shape[0]
    rect = np.empty((n, 4), dtype=np.int64)
    counts = np.zeros(tx * ty + 1, dtype=np.int64)
    for g in range(n):
        u = mean2d[g, 0]
        v = mean2d[g, 1]
        r = float(radius[g])
        lim = np.log(opac[g] / ALPHA_MIN)
        if lim <= 0.0:
            rect[g, 0] = 0
            rect[g, 1] = 0
            rect[g, 2] = 0
            rect[g, 3] = 0
            continue
        if lim < 4.5:
            # one pixel of slack on top of the exact support
            r = min(r, np.ceil(r / 3.0 * np.sqrt(2.0 * lim)) + 1.0)
        x0 = max(0, min(tx, int(np.floor((u - r) / tile))))
        x1 = max(0, min(tx, int(np.floor((u + r) / tile)) + 1))
        y0 = max(0, min(ty, int(np.floor((v - r) / tile))))
        y1 = max(0, min(ty, int(np.floor((v + r) / tile)) + 1))
        rect[g, 0] = x0
        rect[g, 1] = x1
        rect[g, 2] = y0
        rect[g, 3] = y1
        for y in range(y0, y1):
            for x in range(x0, x1):
                counts[y * tx + x + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for g in range(n):
        for y in range(rect[g, 2], rect[g, 3]):
            for x in range(rect[g, 0], rect[g, 1]):
                t = y * tx + x
                ids[fill[t]] = g
                fill[t] += 1
    return offsets, ids


@njit(cache=True, inline="always")
def splat_alpha(mean2d, conic, opac, g, px, py):
    dx = mean2d[g, 0] - px
    dy = mean2d[g, 1] - py
    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
    if power > 0.0 or power < POWER_SKIP:
        return 0.0
    a = opac[g] * np.exp(power)
    if a > ALPHA_MAX:
        a = ALPHA_MAX
    if a < ALPHA_MIN:
        return 0.0
    return a


@njit(parallel=True, cache=True)
def forward_kernel(offsets, ids, width, height, tile, mean2d, conic, opac, color,
                   depth, normal, dist, tau, theta_t,
                   out_color, out_depth, out_normal, out_dist, out_alpha, out_mask,
                   final_t, last_entry, mask_entry):
    tx = (width + tile - 1) // tile
    ty = (height + tile - 1) // tile
    for t in prange(tx * ty):
        bx = (t % tx) * tile
        by = (t // tx) * tile
        start = offsets[t]
        end = offsets[t + 1]
        for y in range(by, min(by + tile, height)):
            for x in range(bx, min(bx + tile, width)):
                px = x + 0.5
                py = y + 0.5
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dz = 0.0
                n0 = 0.0
                n1 = 0.0
                n2 = 0.0
                ds = 0.0
                acc = 0.0
                last = -1
                sel = -1
                for k in range(start, end):
                    g = ids[k]
                    a = splat_alpha(mean2d, conic, opac, g, px, py)
                    if a == 0.0:
                        continue
                    if T >= theta_t:
                        sel = k
                    w = a * T
                    c0 += w * color[g, 0]
                    c1 += w * color[g, 1]
                    c2 += w * color[g, 2]
                    dz += w * depth[g]
                    n0 += w * normal[g, 0]
                    n1 += w * normal[g, 1]
                    n2 += w * normal[g, 2]
                    ds += w * dist[g]
                    acc += w
                    T = T * (1.0 - a)
                    last = k
                    if T < T_MIN:
                        break
                out_color[y, x, 0] = c0
                out_color[y, x, 1] = c1
                out_color[y, x, 2] = c2
                out_depth[y, x] = dz
                out_normal[y, x, 0] = n0
                out_normal[y, x, 1] = n1
                out_normal[y, x, 2] = n2
                out_dist[y, x] = ds
                out_alpha[y, x] = acc
                out_mask[y, x] = tau[ids[sel]] if sel >= 0 else 0.0
                final_t[y, x] = T
                last_entry[y, x] = last
                mask_entry[y, x] = sel


@njit(parallel=True, cache=True)
def backward_kernel(offsets, ids, width, height, tile, mean2d, conic, opac, color,
                    depth, normal, dist, final_t, last_entry, mask_entry,
                    g_color, g_depth, g_normal, g_dist, g_alpha, g_mask, entry_grad):
    """Per-entry gradient contributions; reduce with ``reduce_entry_grads``."""
    tx = (width + tile - 1) // tile
    ty = (height + tile - 1) // tile
    for t in prange(tx * ty):
        bx = (t % tx) * tile
        by = (t // tx) * tile
        start = offsets[t]
        for y in range(by, min(by + tile, height)):
            for x in range(bx, min(bx + tile, width)):
                last = last_entry[y, x]
                sel = mask_entry[y, x]
                if sel >= 0:
                    entry_grad[sel, G_TAU] += g_mask[y, x]
                if last < 0:
                    continue
                px = x + 0.5
                py = y + 0.5
                gc0 = g_color[y, x, 0]
                gc1 = g_color[y, x, 1]
                gc2 = g_color[y, x, 2]
                gz = g_depth[y, x]
                gn0 = g_normal[y, x, 0]
                gn1 = g_normal[y, x, 1]
                gn2 = g_normal[y, x, 2]
                gd = g_dist[y, x]
                ga = g_alpha[y, x]
                T = final_t[y, x]
                bc0 = 0.0
                bc1 = 0.0
                bc2 = 0.0
                bz = 0.0
                bn0 = 0.0
                bn1 = 0.0
                bn2 = 0.0
                bd = 0.0
                ba = 0.0
                for k in range(last, start - 1, -1):
                    g = ids[k]
                    dx = mean2d[g, 0] - px
                    dy = mean2d[g, 1] - py
                    ca = conic[g, 0]
                    cb = conic[g, 1]
                    cc = conic[g, 2]
                    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                    if power > 0.0 or power < POWER_SKIP:
                        continue
                    G = np.exp(power)
                    raw = opac[g] * G
                    a = raw if raw < ALPHA_MAX else ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    T = T / (1.0 - a)
                    w = a * T
                    eg = entry_grad[k]
                    eg[G_COLOR] += w * gc0
                    eg[G_COLOR + 1] += w * gc1
                    eg[G_COLOR + 2] += w * gc2
                    eg[G_DEPTH] += w * gz
                    eg[G_NORMAL] += w * gn0
                    eg[G_NORMAL + 1] += w * gn1
                    eg[G_NORMAL + 2] += w * gn2
                    eg[G_DIST] += w * gd
                    cg0 = color[g, 0]
                    cg1 = color[g, 1]
                    cg2 = color[g, 2]
                    zg = depth[g]
                    ng0 = normal[g, 0]
                    ng1 = normal[g, 1]
                    ng2 = normal[g, 2]
                    dg = dist[g]
                    dl_da = T * (
                        gc0 * (cg0 - bc0) + gc1 * (cg1 - bc1) + gc2 * (cg2 - bc2)
                        + gz * (zg - bz)
                        + gn0 * (ng0 - bn0) + gn1 * (ng1 - bn1) + gn2 * (ng2 - bn2)
                        + gd * (dg - bd)
                        + ga * (1.0 - ba)
                    )
                    om = 1.0 - a
                    bc0 = a * cg0 + om * bc0
                    bc1 = a * cg1 + om * bc1
                    bc2 = a * cg2 + om * bc2
                    bz = a * zg + om * bz
                    bn0 = a * ng0 + om * bn0
                    bn1 = a * ng1 + om * bn1
                    bn2 = a * ng2 + om * bn2
                    bd = a * dg + om * bd
                    ba = a + om * ba
                    if raw >= ALPHA_MAX:
                        continue
                    eg[G_OPAC] += dl_da * G
                    dl_dp = dl_da * a
                    eg[G_MEAN] += -dl_dp * (ca * dx + cb * dy)
                    eg[G_MEAN + 1] += -dl_dp * (cc * dy + cb * dx)
                    eg[G_CONIC] += -0.5 * dl_dp * dx * dx
                    eg[G_CONIC + 1] += -dl_dp * dx * dy
                    eg[G_CONIC + 2] += -0.5 * dl_dp * dy * dy


@njit(cache=True)
def reduce_entry_grads(ids, entry_grad, n):
    out = np.zeros((n, G_WIDTH))
    for k in range(ids.shape[0]):
        g = ids[k]
        for j in range(G_WIDTH):
            out[g, j] += entry_grad[k, j]
    return out


@njit(cache=True)
def _collect_pixel(offsets, ids, t, px, py, mean2d, conic, opac, buf_g, buf_a, buf_t):
    start = offsets[t]
    end = offsets[t + 1]
    T = 1.0
    m = 0
    for k in range(start, end):
        g = ids[k]
        a = splat_alpha(mean2d, conic, opac, g, px, py)
        if a == 0.0:
            continue
        if buf_g.shape[0] > 0:
            buf_g[m] = g
            buf_a[m] = a
            buf_t[m] = T
        m += 1
        T = T * (1.0 - a)
        if T < T_MIN:
            break
    return m


@njit(parallel=True, cache=True)
def count_fragments(offsets, ids, width, height, tile, mean2d, conic, opac):
    tx = (width + tile - 1) // tile
    counts = np.zeros(width * height, dtype=np.int64)
    dummy_g = np.empty(0, dtype=np.int64)
    dummy_f = np.empty(0)
    for p in prange(width * height):
        y = p // width
        x = p % width
        t = (y // tile) * tx + x // tile
        counts[p] = _collect_pixel(offsets, ids, t, x + 0.5, y + 0.5, mean2d, conic, opac,
                                   dummy_g, dummy_f, dummy_f)
    return counts


@njit(parallel=True, cache=True)
def fill_fragments(offsets, ids, width, height, tile, mean2d, conic, opac, frag_off,
                   out_g, out_a, out_t):
    tx = (width + tile - 1) // tile
    for p in prange(width * height):
        y = p // width
        x = p % width
        t = (y // tile) * tx + x // tile
        s = frag_off[p]
        e = frag_off[p + 1]
        _collect_pixel(offsets, ids, t, x + 0.5, y + 0.5, mean2d, conic, opac,
                       out_g[s:e], out_a[s:e], out_t[s:e])


@njit(cache=True)
def composite_list(alpha, payload):
    """Front-to-back blend of one depth-sorted list.

    Returns (blended payload, accumulated weight, final transmittance, used count).
    """
    k = payload.shape[1]
    out = np.zeros(k)
    T = 1.0
    acc = 0.0
    used = 0
    for i in range(alpha.shape[0]):
        a = alpha[i]
        w = a * T
        for j in range(k):
            out[j] += w * payload[i, j]
        acc += w
        T = T * (1.0 - a)
        used += 1
        if T < T_MIN:
            break
    return out, acc, T, used


@njit(cache=True)
def mask_select(T, tau, theta_t):
    """Index of the deepest fragment with T_i >= theta_t, or -1."""
    sel = -1
    for i in range(T.shape[0]):
        if T[i] >= theta_t:
            sel = i
    return sel


@njit(cache=True)
def plane_depth_scalar(dist, ndotv, eps):
    """Ray length to a Gaussian's plane; ``ndotv`` is the cosine between the
    camera-facing normal and the direction back to the camera."""
    den = ndotv if ndotv > eps else eps
    return dist / den


@njit(cache=True)
def first_surface_list(T, alpha, dhat, t_start, t_end, dt):
    """Maximum-weight window search over one fragment list.

    Returns (depth, weight sum, anchor position in the candidate list, member
    mask over the fragments).  depth is NaN when no fragment is a candidate.
    """
    n = T.shape[0]
    member = np.zeros(n, dtype=np.bool_)
    cand = np.empty(n, dtype=np.int64)
    m = 0
    for i in range(n):
        if T[i] >= t_end and T[i] <= t_start:
            cand[m] = i
            m += 1
    if m == 0:
        return np.nan, 0.0, -1, member
    cand = cand[:m]
    keys = np.empty(m)
    for j in range(m):
        keys[j] = dhat[cand[j]]
    order = np.argsort(keys, kind="mergesort")
    best = -1.0
    best_lo = 0
    best_hi = 0
    hi = 0
    lo = 0
    while lo < m:
        anchor = keys[order[lo]]
        if hi < lo:
            hi = lo
        while hi < m and keys[order[hi]] < anchor + dt:
            hi += 1
        s = 0.0
        for q in range(lo, hi):
            i = cand[order[q]]
            s += T[i] * alpha[i]
        if s > best:
            best = s
            best_lo = lo
            best_hi = hi
        nxt = lo + 1
        while nxt < m and keys[order[nxt]] == anchor:
            nxt += 1
        lo = nxt
    num = 0.0
    den = 0.0
    for q in range(best_lo, best_hi):
        i = cand[order[q]]
        w = T[i] * alpha[i]
        num += w * dhat[i]
        den += w
        member[i] = True
    return num / den, best, best_lo, member


@njit(parallel=True, cache=True)
def depth_estimators(frag_off, frag_t, frag_a, frag_dhat, frag_grazing, unbiased, mask,
                     t_start, t_end, dt, gate):
    """Per-pixel nearest and first-surface range depths (0 = no hit).

    flags: bit0 grazing fragment present, bit1 first-surface fell back to the
    unbiased estimate (gate closed or no candidate), bit2 no candidate.
    """
    npix = frag_off.shape[0] - 1
    nearest = np.zeros(npix)
    first = np.zeros(npix)
    flags = np.zeros(npix, dtype=np.int64)
    for p in prange(npix):
        s = frag_off[p]
        e = frag_off[p + 1]
        if e == s:
            continue
        mn = np.inf
        fl = 0
        for i in range(s, e):
            if frag_dhat[i] < mn:
                mn = frag_dhat[i]
            if frag_grazing[i]:
                fl |= 1
        nearest[p] = mn
        if mask[p] >= gate:
            d, _, _, _ = first_surface_list(frag_t[s:e], frag_a[s:e], frag_dhat[s:e],
                                            t_start, t_end, dt)
            if np.isnan(d):
                first[p] = unbiased[p]
                fl |= 6
            else:
                first[p] = d
        else:
            first[p] = unbiased[p]
            fl |= 2
        flags[p] = fl
    return nearest, first, flags
