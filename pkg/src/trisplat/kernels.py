"""Numba pixel kernels for tile-based splat rendering.

Two splat families share one structure: triangle splats (edge-preserving
kernel on signed edge forms) and surfel Gaussians (radial kernel, color
payload). For each, a forward kernel composites front-to-back per pixel and
a backward kernel replays the identical traversal, then walks each pixel's
contribution list in reverse to form exact per-splat gradients.

All kernels are sequential and allocation-free inside the pixel loops, so
runs are bit-reproducible. Geometry chains stop at the local frame level
(``g_pu``, ``g_pv``, ``g_mu``, ``g_n``, ``g_a_hat``); the vertex chain lives
in :func:`trisplat.geometry.frame_backward`.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# Contributions below this weight are skipped in both passes.
W_FLOOR = 1e-12
# Compositing weight ceiling; keeps transmittance strictly positive.
W_CEIL = 1.0 - 1e-12
# Denominator floor for the homogeneous-plane intersection (parallel ray).
DENOM_FLOOR = 1e-12


@njit(cache=True)
def radix_argsort_u64(keys):
    """Stable LSD radix sort (8 passes x 8 bits) over uint64 keys.

    Returns the permutation that sorts ``keys`` ascending; equal keys keep
    their input order.
    """
    n = keys.shape[0]
    order = np.arange(n, dtype=np.int64)
    buf = np.empty(n, dtype=np.int64)
    counts = np.empty(256, dtype=np.int64)
    mask = np.uint64(0xFF)
    for p in range(8):
        shift = np.uint64(8 * p)
        for b in range(256):
            counts[b] = 0
        for i in range(n):
            b = np.int64((keys[order[i]] >> shift) & mask)
            counts[b] += 1
        total = np.int64(0)
        for b in range(256):
            c = counts[b]
            counts[b] = total
            total += c
        for i in range(n):
            b = np.int64((keys[order[i]] >> shift) & mask)
            buf[counts[b]] = order[i]
            counts[b] += 1
        tmp = order
        order = buf
        buf = tmp
    return order


@njit(cache=True)
def dedup_first_per_tile(tile_of_entry, parent_of_entry, n_parents):
    """Keep the first entry of each (tile, parent) pair in scan order.

    Entries must be grouped by tile (depth-sorted within); returns a boolean
    keep mask. Used to enforce the one-contribution-per-original-triangle
    rule at the tile level.
    """
    n = tile_of_entry.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    stamp = np.full(n_parents, -1, dtype=np.int64)
    for i in range(n):
        p = parent_of_entry[i]
        t = tile_of_entry[i]
        if stamp[p] != t:
            stamp[p] = t
            keep[i] = True
    return keep


@njit(cache=True)
def forward_triangle_tiles(
    width, height, tile_size, tiles_x,
    tile_offsets, tile_splats,
    pu, pv, mu, a_hat, alpha, delta, sigma, normal,
    pu_r0, pu_r1, pu_r3, pv_r0, pv_r1, pv_r3, mu_r0, mu_r1, mu_r3,
    cam_center, zrow, zoff, near, eps_t,
    out_depth, out_normal, out_alpha, out_gamma,
):
    n_tiles = tile_offsets.shape[0] - 1
    for tile in range(n_tiles):
        lo = tile_offsets[tile]
        hi = tile_offsets[tile + 1]
        if hi == lo:
            continue
        tx = tile % tiles_x
        ty = tile // tiles_x
        px0 = tx * tile_size
        py0 = ty * tile_size
        px1 = min(px0 + tile_size, width)
        py1 = min(py0 + tile_size, height)
        for py in range(py0, py1):
            y = py + 0.5
            for px in range(px0, px1):
                x = px + 0.5
                trans = 1.0
                acc_d = 0.0
                acc_n0 = 0.0
                acc_n1 = 0.0
                acc_n2 = 0.0
                acc_a = 0.0
                for e in range(lo, hi):
                    i = tile_splats[e]
                    a_x = x * pu_r3[i] - pu_r0[i]
                    b_x = x * pv_r3[i] - pv_r0[i]
                    c_x = x * mu_r3[i] - mu_r0[i]
                    a_y = y * pu_r3[i] - pu_r1[i]
                    b_y = y * pv_r3[i] - pv_r1[i]
                    c_y = y * mu_r3[i] - mu_r1[i]
                    denom = a_x * b_y - b_x * a_y
                    if abs(denom) < DENOM_FLOOR:
                        continue
                    u = (b_x * c_y - c_x * b_y) / denom
                    v = (c_x * a_y - a_x * c_y) / denom
                    qx = mu[i, 0] + u * pu[i, 0] + v * pv[i, 0]
                    qy = mu[i, 1] + u * pu[i, 1] + v * pv[i, 1]
                    qz = mu[i, 2] + u * pu[i, 2] + v * pv[i, 2]
                    zc = zrow[0] * qx + zrow[1] * qy + zrow[2] * qz + zoff
                    if zc <= near:
                        continue
                    a = a_hat[i]
                    d0 = u + (1.0 - a) * v - 1.0
                    d1 = -2.0 * u + (2.0 * a + 1.0) * v - 1.0
                    d2 = u + (-2.0 - a) * v - 1.0
                    dl = delta[i]
                    e0 = dl * d0
                    e1 = dl * d1
                    e2 = dl * d2
                    mx = e0
                    if e1 > mx:
                        mx = e1
                    if e2 > mx:
                        mx = e2
                    lse = mx + np.log(np.exp(e0 - mx) + np.exp(e1 - mx) + np.exp(e2 - mx))
                    g = -sigma[i] * lse
                    s = 1.0 / (1.0 + np.exp(-g))
                    w = s * alpha[i]
                    if w < W_FLOOR:
                        continue
                    if w > W_CEIL:
                        w = W_CEIL
                    dx = qx - cam_center[0]
                    dy = qy - cam_center[1]
                    dz = qz - cam_center[2]
                    dist = np.sqrt(dx * dx + dy * dy + dz * dz)
                    wt = w * trans
                    acc_d += dist * wt
                    acc_n0 += normal[i, 0] * wt
                    acc_n1 += normal[i, 1] * wt
                    acc_n2 += normal[i, 2] * wt
                    acc_a += wt
                    out_gamma[i] += wt
                    trans *= 1.0 - w
                    if trans < eps_t:
                        break
                out_depth[py, px] = acc_d
                out_normal[py, px, 0] = acc_n0
                out_normal[py, px, 1] = acc_n1
                out_normal[py, px, 2] = acc_n2
                out_alpha[py, px] = acc_a


@njit(cache=True)
def backward_triangle_tiles(
    width, height, tile_size, tiles_x,
    tile_offsets, tile_splats,
    pu, pv, mu, a_hat, alpha, delta, sigma, normal,
    pu_r0, pu_r1, pu_r3, pv_r0, pv_r1, pv_r3, mu_r0, mu_r1, mu_r3,
    cam_center, zrow, zoff, near, eps_t,
    r0, r1, r3,
    grad_depth, grad_normal, grad_alpha,
    g_pu, g_pv, g_mu, g_n, g_a_hat, g_alpha, g_delta, g_sigma,
):
    n_tiles = tile_offsets.shape[0] - 1
    max_len = 0
    for tile in range(n_tiles):
        ln = tile_offsets[tile + 1] - tile_offsets[tile]
        if ln > max_len:
            max_len = ln
    idx_buf = np.empty(max_len, dtype=np.int64)
    u_buf = np.empty(max_len, dtype=np.float64)
    v_buf = np.empty(max_len, dtype=np.float64)
    w_buf = np.empty(max_len, dtype=np.float64)
    lse_buf = np.empty(max_len, dtype=np.float64)
    dist_buf = np.empty(max_len, dtype=np.float64)
    t_buf = np.empty(max_len, dtype=np.float64)

    for tile in range(n_tiles):
        lo = tile_offsets[tile]
        hi = tile_offsets[tile + 1]
        if hi == lo:
            continue
        tx = tile % tiles_x
        ty = tile // tiles_x
        px0 = tx * tile_size
        py0 = ty * tile_size
        px1 = min(px0 + tile_size, width)
        py1 = min(py0 + tile_size, height)
        for py in range(py0, py1):
            y = py + 0.5
            for px in range(px0, px1):
                x = px + 0.5
                gd_pix = grad_depth[py, px]
                gn0 = grad_normal[py, px, 0]
                gn1 = grad_normal[py, px, 1]
                gn2 = grad_normal[py, px, 2]
                ga_pix = grad_alpha[py, px]
                if gd_pix == 0.0 and gn0 == 0.0 and gn1 == 0.0 and gn2 == 0.0 and ga_pix == 0.0:
                    continue
                # Replay the forward traversal, recording contributions.
                trans = 1.0
                cnt = 0
                for e in range(lo, hi):
                    i = tile_splats[e]
                    a_x = x * pu_r3[i] - pu_r0[i]
                    b_x = x * pv_r3[i] - pv_r0[i]
                    c_x = x * mu_r3[i] - mu_r0[i]
                    a_y = y * pu_r3[i] - pu_r1[i]
                    b_y = y * pv_r3[i] - pv_r1[i]
                    c_y = y * mu_r3[i] - mu_r1[i]
                    denom = a_x * b_y - b_x * a_y
                    if abs(denom) < DENOM_FLOOR:
                        continue
                    u = (b_x * c_y - c_x * b_y) / denom
                    v = (c_x * a_y - a_x * c_y) / denom
                    qx = mu[i, 0] + u * pu[i, 0] + v * pv[i, 0]
                    qy = mu[i, 1] + u * pu[i, 1] + v * pv[i, 1]
                    qz = mu[i, 2] + u * pu[i, 2] + v * pv[i, 2]
                    zc = zrow[0] * qx + zrow[1] * qy + zrow[2] * qz + zoff
                    if zc <= near:
                        continue
                    a = a_hat[i]
                    d0 = u + (1.0 - a) * v - 1.0
                    d1 = -2.0 * u + (2.0 * a + 1.0) * v - 1.0
                    d2 = u + (-2.0 - a) * v - 1.0
                    dl = delta[i]
                    e0 = dl * d0
                    e1 = dl * d1
                    e2 = dl * d2
                    mx = e0
                    if e1 > mx:
                        mx = e1
                    if e2 > mx:
                        mx = e2
                    lse = mx + np.log(np.exp(e0 - mx) + np.exp(e1 - mx) + np.exp(e2 - mx))
                    g = -sigma[i] * lse
                    s = 1.0 / (1.0 + np.exp(-g))
                    w = s * alpha[i]
                    if w < W_FLOOR:
                        continue
                    if w > W_CEIL:
                        w = W_CEIL
                    dx = qx - cam_center[0]
                    dy = qy - cam_center[1]
                    dz = qz - cam_center[2]
                    dist = np.sqrt(dx * dx + dy * dy + dz * dz)
                    idx_buf[cnt] = i
                    u_buf[cnt] = u
                    v_buf[cnt] = v
                    w_buf[cnt] = w
                    lse_buf[cnt] = lse
                    dist_buf[cnt] = dist
                    t_buf[cnt] = trans
                    cnt += 1
                    trans *= 1.0 - w
                    if trans < eps_t:
                        break
                # Reverse sweep: rear sums hold contributions of later splats.
                rear_d = 0.0
                rear_n0 = 0.0
                rear_n1 = 0.0
                rear_n2 = 0.0
                rear_a = 0.0
                for c in range(cnt - 1, -1, -1):
                    i = idx_buf[c]
                    u = u_buf[c]
                    v = v_buf[c]
                    w = w_buf[c]
                    lse = lse_buf[c]
                    dist = dist_buf[c]
                    tb = t_buf[c]
                    one_m = 1.0 - w
                    gw = gd_pix * (dist * tb - rear_d / one_m)
                    gw += gn0 * (normal[i, 0] * tb - rear_n0 / one_m)
                    gw += gn1 * (normal[i, 1] * tb - rear_n1 / one_m)
                    gw += gn2 * (normal[i, 2] * tb - rear_n2 / one_m)
                    gw += ga_pix * (tb - rear_a / one_m)
                    g_dist = gd_pix * w * tb
                    gp_n0 = gn0 * w * tb
                    gp_n1 = gn1 * w * tb
                    gp_n2 = gn2 * w * tb
                    wt = w * tb
                    rear_d += dist * wt
                    rear_n0 += normal[i, 0] * wt
                    rear_n1 += normal[i, 1] * wt
                    rear_n2 += normal[i, 2] * wt
                    rear_a += wt

                    # Kernel chain: w = sigmoid(-sigma*lse) * alpha.
                    al = alpha[i]
                    sg = sigma[i]
                    dl = delta[i]
                    a = a_hat[i]
                    s = w / al
                    g_alpha[i] += gw * s
                    g_big = gw * al * s * (1.0 - s)
                    g_sigma[i] += g_big * (-lse)
                    d0 = u + (1.0 - a) * v - 1.0
                    d1 = -2.0 * u + (2.0 * a + 1.0) * v - 1.0
                    d2 = u + (-2.0 - a) * v - 1.0
                    p0 = np.exp(dl * d0 - lse)
                    p1 = np.exp(dl * d1 - lse)
                    p2 = np.exp(dl * d2 - lse)
                    g_delta[i] += g_big * (-sg) * (p0 * d0 + p1 * d1 + p2 * d2)
                    gd0 = g_big * (-sg * dl) * p0
                    gd1 = g_big * (-sg * dl) * p1
                    gd2 = g_big * (-sg * dl) * p2
                    g_u = gd0 - 2.0 * gd1 + gd2
                    g_v = gd0 * (1.0 - a) + gd1 * (2.0 * a + 1.0) + gd2 * (-2.0 - a)
                    g_a_hat[i] += v * (-gd0 + 2.0 * gd1 - gd2)

                    # Depth payload chain: dist = |q - o|, q = mu + u pu + v pv.
                    qx = mu[i, 0] + u * pu[i, 0] + v * pv[i, 0]
                    qy = mu[i, 1] + u * pu[i, 1] + v * pv[i, 1]
                    qz = mu[i, 2] + u * pu[i, 2] + v * pv[i, 2]
                    gq0 = g_dist * (qx - cam_center[0]) / dist
                    gq1 = g_dist * (qy - cam_center[1]) / dist
                    gq2 = g_dist * (qz - cam_center[2]) / dist
                    g_u += gq0 * pu[i, 0] + gq1 * pu[i, 1] + gq2 * pu[i, 2]
                    g_v += gq0 * pv[i, 0] + gq1 * pv[i, 1] + gq2 * pv[i, 2]
                    g_mu[i, 0] += gq0
                    g_mu[i, 1] += gq1
                    g_mu[i, 2] += gq2
                    g_pu[i, 0] += u * gq0
                    g_pu[i, 1] += u * gq1
                    g_pu[i, 2] += u * gq2
                    g_pv[i, 0] += v * gq0
                    g_pv[i, 1] += v * gq1
                    g_pv[i, 2] += v * gq2

                    # Intersection chain through the six plane coefficients.
                    a_x = x * pu_r3[i] - pu_r0[i]
                    b_x = x * pv_r3[i] - pv_r0[i]
                    c_x = x * mu_r3[i] - mu_r0[i]
                    a_y = y * pu_r3[i] - pu_r1[i]
                    b_y = y * pv_r3[i] - pv_r1[i]
                    c_y = y * mu_r3[i] - mu_r1[i]
                    inv = 1.0 / (a_x * b_y - b_x * a_y)
                    ga_x = (-u * b_y) * inv * g_u + (-c_y - v * b_y) * inv * g_v
                    gb_x = (c_y + u * a_y) * inv * g_u + (v * a_y) * inv * g_v
                    gc_x = (-b_y) * inv * g_u + a_y * inv * g_v
                    ga_y = (u * b_x) * inv * g_u + (c_x + v * b_x) * inv * g_v
                    gb_y = (-c_x - u * a_x) * inv * g_u + (-v * a_x) * inv * g_v
                    gc_y = b_x * inv * g_u + (-a_x) * inv * g_v
                    for ax in range(3):
                        gxc = x * r3[ax] - r0[ax]
                        gyc = y * r3[ax] - r1[ax]
                        g_pu[i, ax] += ga_x * gxc + ga_y * gyc
                        g_pv[i, ax] += gb_x * gxc + gb_y * gyc
                        g_mu[i, ax] += gc_x * gxc + gc_y * gyc

                    g_n[i, 0] += gp_n0
                    g_n[i, 1] += gp_n1
                    g_n[i, 2] += gp_n2


@njit(cache=True)
def forward_surfel_tiles(
    width, height, tile_size, tiles_x,
    tile_offsets, tile_splats,
    pu, pv, mu, opacity, color, normal,
    pu_r0, pu_r1, pu_r3, pv_r0, pv_r1, pv_r3, mu_r0, mu_r1, mu_r3,
    cam_center, zrow, zoff, near, eps_t,
    out_color, out_depth, out_normal, out_alpha,
):
    n_tiles = tile_offsets.shape[0] - 1
    for tile in range(n_tiles):
        lo = tile_offsets[tile]
        hi = tile_offsets[tile + 1]
        if hi == lo:
            continue
        tx = tile % tiles_x
        ty = tile // tiles_x
        px0 = tx * tile_size
        py0 = ty * tile_size
        px1 = min(px0 + tile_size, width)
        py1 = min(py0 + tile_size, height)
        for py in range(py0, py1):
            y = py + 0.5
            for px in range(px0, px1):
                x = px + 0.5
                trans = 1.0
                acc_c0 = 0.0
                acc_c1 = 0.0
                acc_c2 = 0.0
                acc_d = 0.0
                acc_n0 = 0.0
                acc_n1 = 0.0
                acc_n2 = 0.0
                acc_a = 0.0
                for e in range(lo, hi):
                    i = tile_splats[e]
                    a_x = x * pu_r3[i] - pu_r0[i]
                    b_x = x * pv_r3[i] - pv_r0[i]
                    c_x = x * mu_r3[i] - mu_r0[i]
                    a_y = y * pu_r3[i] - pu_r1[i]
                    b_y = y * pv_r3[i] - pv_r1[i]
                    c_y = y * mu_r3[i] - mu_r1[i]
                    denom = a_x * b_y - b_x * a_y
                    if abs(denom) < DENOM_FLOOR:
                        continue
                    u = (b_x * c_y - c_x * b_y) / denom
                    v = (c_x * a_y - a_x * c_y) / denom
                    qx = mu[i, 0] + u * pu[i, 0] + v * pv[i, 0]
                    qy = mu[i, 1] + u * pu[i, 1] + v * pv[i, 1]
                    qz = mu[i, 2] + u * pu[i, 2] + v * pv[i, 2]
                    zc = zrow[0] * qx + zrow[1] * qy + zrow[2] * qz + zoff
                    if zc <= near:
                        continue
                    rho = u * u + v * v
                    w = opacity[i] * np.exp(-0.5 * rho)
                    if w < W_FLOOR:
                        continue
                    if w > W_CEIL:
                        w = W_CEIL
                    dx = qx - cam_center[0]
                    dy = qy - cam_center[1]
                    dz = qz - cam_center[2]
                    dist = np.sqrt(dx * dx + dy * dy + dz * dz)
                    wt = w * trans
                    acc_c0 += color[i, 0] * wt
                    acc_c1 += color[i, 1] * wt
                    acc_c2 += color[i, 2] * wt
                    acc_d += dist * wt
                    acc_n0 += normal[i, 0] * wt
                    acc_n1 += normal[i, 1] * wt
                    acc_n2 += normal[i, 2] * wt
                    acc_a += wt
                    trans *= 1.0 - w
                    if trans < eps_t:
                        break
                out_color[py, px, 0] = acc_c0
                out_color[py, px, 1] = acc_c1
                out_color[py, px, 2] = acc_c2
                out_depth[py, px] = acc_d
                out_normal[py, px, 0] = acc_n0
                out_normal[py, px, 1] = acc_n1
                out_normal[py, px, 2] = acc_n2
                out_alpha[py, px] = acc_a


@njit(cache=True)
def backward_surfel_tiles(
    width, height, tile_size, tiles_x,
    tile_offsets, tile_splats,
    pu, pv, mu, opacity, color, normal,
    pu_r0, pu_r1, pu_r3, pv_r0, pv_r1, pv_r3, mu_r0, mu_r1, mu_r3,
    cam_center, zrow, zoff, near, eps_t,
    r0, r1, r3,
    grad_color, grad_depth, grad_normal, grad_alpha,
    g_pu, g_pv, g_mu, g_n, g_opacity, g_color,
):
    n_tiles = tile_offsets.shape[0] - 1
    max_len = 0
    for tile in range(n_tiles):
        ln = tile_offsets[tile + 1] - tile_offsets[tile]
        if ln > max_len:
            max_len = ln
    idx_buf = np.empty(max_len, dtype=np.int64)
    u_buf = np.empty(max_len, dtype=np.float64)
    v_buf = np.empty(max_len, dtype=np.float64)
    w_buf = np.empty(max_len, dtype=np.float64)
    dist_buf = np.empty(max_len, dtype=np.float64)
    t_buf = np.empty(max_len, dtype=np.float64)

    for tile in range(n_tiles):
        lo = tile_offsets[tile]
        hi = tile_offsets[tile + 1]
        if hi == lo:
            continue
        tx = tile % tiles_x
        ty = tile // tiles_x
        px0 = tx * tile_size
        py0 = ty * tile_size
        px1 = min(px0 + tile_size, width)
        py1 = min(py0 + tile_size, height)
        for py in range(py0, py1):
            y = py + 0.5
            for px in range(px0, px1):
                x = px + 0.5
                gc0 = grad_color[py, px, 0]
                gc1 = grad_color[py, px, 1]
                gc2 = grad_color[py, px, 2]
                gd_pix = grad_depth[py, px]
                gn0 = grad_normal[py, px, 0]
                gn1 = grad_normal[py, px, 1]
                gn2 = grad_normal[py, px, 2]
                ga_pix = grad_alpha[py, px]
                if (
                    gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0
                    and gd_pix == 0.0 and gn0 == 0.0 and gn1 == 0.0
                    and gn2 == 0.0 and ga_pix == 0.0
                ):
                    continue
                trans = 1.0
                cnt = 0
                for e in range(lo, hi):
                    i = tile_splats[e]
                    a_x = x * pu_r3[i] - pu_r0[i]
                    b_x = x * pv_r3[i] - pv_r0[i]
                    c_x = x * mu_r3[i] - mu_r0[i]
                    a_y = y * pu_r3[i] - pu_r1[i]
                    b_y = y * pv_r3[i] - pv_r1[i]
                    c_y = y * mu_r3[i] - mu_r1[i]
                    denom = a_x * b_y - b_x * a_y
                    if abs(denom) < DENOM_FLOOR:
                        continue
                    u = (b_x * c_y - c_x * b_y) / denom
                    v = (c_x * a_y - a_x * c_y) / denom
                    qx = mu[i, 0] + u * pu[i, 0] + v * pv[i, 0]
                    qy = mu[i, 1] + u * pu[i, 1] + v * pv[i, 1]
                    qz = mu[i, 2] + u * pu[i, 2] + v * pv[i, 2]
                    zc = zrow[0] * qx + zrow[1] * qy + zrow[2] * qz + zoff
                    if zc <= near:
                        continue
                    rho = u * u + v * v
                    w = opacity[i] * np.exp(-0.5 * rho)
                    if w < W_FLOOR:
                        continue
                    if w > W_CEIL:
                        w = W_CEIL
                    dx = qx - cam_center[0]
                    dy = qy - cam_center[1]
                    dz = qz - cam_center[2]
                    dist = np.sqrt(dx * dx + dy * dy + dz * dz)
                    idx_buf[cnt] = i
                    u_buf[cnt] = u
                    v_buf[cnt] = v
                    w_buf[cnt] = w
                    dist_buf[cnt] = dist
                    t_buf[cnt] = trans
                    cnt += 1
                    trans *= 1.0 - w
                    if trans < eps_t:
                        break
                rear_c0 = 0.0
                rear_c1 = 0.0
                rear_c2 = 0.0
                rear_d = 0.0
                rear_n0 = 0.0
                rear_n1 = 0.0
                rear_n2 = 0.0
                rear_a = 0.0
                for c in range(cnt - 1, -1, -1):
                    i = idx_buf[c]
                    u = u_buf[c]
                    v = v_buf[c]
                    w = w_buf[c]
                    dist = dist_buf[c]
                    tb = t_buf[c]
                    one_m = 1.0 - w
                    gw = gc0 * (color[i, 0] * tb - rear_c0 / one_m)
                    gw += gc1 * (color[i, 1] * tb - rear_c1 / one_m)
                    gw += gc2 * (color[i, 2] * tb - rear_c2 / one_m)
                    gw += gd_pix * (dist * tb - rear_d / one_m)
                    gw += gn0 * (normal[i, 0] * tb - rear_n0 / one_m)
                    gw += gn1 * (normal[i, 1] * tb - rear_n1 / one_m)
                    gw += gn2 * (normal[i, 2] * tb - rear_n2 / one_m)
                    gw += ga_pix * (tb - rear_a / one_m)
                    g_dist = gd_pix * w * tb
                    wt = w * tb
                    g_color[i, 0] += gc0 * wt
                    g_color[i, 1] += gc1 * wt
                    g_color[i, 2] += gc2 * wt
                    g_n[i, 0] += gn0 * wt
                    g_n[i, 1] += gn1 * wt
                    g_n[i, 2] += gn2 * wt
                    rear_c0 += color[i, 0] * wt
                    rear_c1 += color[i, 1] * wt
                    rear_c2 += color[i, 2] * wt
                    rear_d += dist * wt
                    rear_n0 += normal[i, 0] * wt
                    rear_n1 += normal[i, 1] * wt
                    rear_n2 += normal[i, 2] * wt
                    rear_a += wt

                    # Kernel chain: w = opacity * exp(-rho/2).
                    g_opacity[i] += gw * w / opacity[i]
                    g_rho = gw * (-0.5 * w)
                    g_u = g_rho * 2.0 * u
                    g_v = g_rho * 2.0 * v

                    qx = mu[i, 0] + u * pu[i, 0] + v * pv[i, 0]
                    qy = mu[i, 1] + u * pu[i, 1] + v * pv[i, 1]
                    qz = mu[i, 2] + u * pu[i, 2] + v * pv[i, 2]
                    gq0 = g_dist * (qx - cam_center[0]) / dist
                    gq1 = g_dist * (qy - cam_center[1]) / dist
                    gq2 = g_dist * (qz - cam_center[2]) / dist
                    g_u += gq0 * pu[i, 0] + gq1 * pu[i, 1] + gq2 * pu[i, 2]
                    g_v += gq0 * pv[i, 0] + gq1 * pv[i, 1] + gq2 * pv[i, 2]
                    g_mu[i, 0] += gq0
                    g_mu[i, 1] += gq1
                    g_mu[i, 2] += gq2
                    g_pu[i, 0] += u * gq0
                    g_pu[i, 1] += u * gq1
                    g_pu[i, 2] += u * gq2
                    g_pv[i, 0] += v * gq0
                    g_pv[i, 1] += v * gq1
                    g_pv[i, 2] += v * gq2

                    a_x = x * pu_r3[i] - pu_r0[i]
                    b_x = x * pv_r3[i] - pv_r0[i]
                    c_x = x * mu_r3[i] - mu_r0[i]
                    a_y = y * pu_r3[i] - pu_r1[i]
                    b_y = y * pv_r3[i] - pv_r1[i]
                    c_y = y * mu_r3[i] - mu_r1[i]
                    inv = 1.0 / (a_x * b_y - b_x * a_y)
                    ga_x = (-u * b_y) * inv * g_u + (-c_y - v * b_y) * inv * g_v
                    gb_x = (c_y + u * a_y) * inv * g_u + (v * a_y) * inv * g_v
                    gc_x = (-b_y) * inv * g_u + a_y * inv * g_v
                    ga_y = (u * b_x) * inv * g_u + (c_x + v * b_x) * inv * g_v
                    gb_y = (-c_x - u * a_x) * inv * g_u + (-v * a_x) * inv * g_v
                    gc_y = b_x * inv * g_u + (-a_x) * inv * g_v
                    for ax in range(3):
                        gxc = x * r3[ax] - r0[ax]
                        gyc = y * r3[ax] - r1[ax]
                        g_pu[i, ax] += ga_x * gxc + ga_y * gyc
                        g_pv[i, ax] += gb_x * gxc + gb_y * gyc
                        g_mu[i, ax] += gc_x * gxc + gc_y * gyc
