"""Tile-binned forward rasterization of triangle splats and its exact
analytic backward pass.

Pipeline per camera: cull triangles (a triangle survives when at least one
vertex is visible), build tangent frames, subdivide for depth sorting,
bin sub-triangles to tiles, radix-sort by (tile, fixed-point view depth),
then keep only the first sub-triangle of each original triangle per tile —
ray intersections are always taken against the original triangle, so one
original triangle contributes at most once per pixel while ordering comes
from the sub-triangles.

Depth payloads are Euclidean distances from the camera center to the
ray/tangent-plane intersection (ray depth), not z-depth.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .camera import PinholeCamera, project_points
from .errors import NonFiniteGradient
from .geometry import FrameBatch, batch_frames, frame_backward, subdivide_batch
from .soup import GradientBuffers, TriangleSoup

# Kernel tail width in sigmoid log-odds; weights beyond it are < ~1e-6.
TAIL_CUT = 14.0


@dataclass
class RenderSettings:
    tile_size: int = 16
    edge_threshold: float | None = None  # None: soup bbox diagonal / 64
    near: float = 0.01
    guard_band: float = 0.2
    transmittance_cutoff: float = 1e-4
    subdivision_cap: int = 8

    def resolve_edge_threshold(self, soup: TriangleSoup) -> float:
        if self.edge_threshold is not None:
            return float(self.edge_threshold)
        diag = soup.bbox_diagonal() if len(soup) else 1.0
        return max(diag / 64.0, 1e-9)


@dataclass
class RenderTarget:
    """Composited per-pixel outputs plus per-triangle contribution stats."""

    depth: np.ndarray    # (H, W) ray depth
    normal: np.ndarray   # (H, W, 3), unnormalized blend, world frame
    alpha: np.ndarray    # (H, W) in [0, 1]
    gamma_partial: np.ndarray  # (n_soup,) summed blended weights this image
    visible: np.ndarray        # (n_soup,) bool: survived culling this image
    skipped_ids: np.ndarray    # ids of degenerate triangles that were skipped


@dataclass
class PreparedSplats:
    """Per-visible-triangle frame data plus the tile traversal plan."""

    rows: np.ndarray      # (P,) soup row of each prepared splat
    frames: FrameBatch    # frames of the prepared rows (length P)
    pu: np.ndarray        # (P, 3) first H column
    pv: np.ndarray        # (P, 3) second H column
    alpha: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    flip: np.ndarray      # (P,) +-1, orients the normal payload toward the camera
    dots: dict            # 9 precomputed plane-coefficient dot arrays
    tile_offsets: np.ndarray
    tile_splats: np.ndarray
    tiles_x: int
    tiles_y: int
    skipped_ids: np.ndarray
    capped: bool

    @property
    def n_render(self) -> np.ndarray:
        """Camera-facing normals composited into the normal map."""
        return self.frames.n * self.flip[:, None]


def ray_tangent_intersection(
    H: np.ndarray,
    camera: PinholeCamera,
    pixel,
    near: float = 0.01,
) -> np.ndarray | None:
    """Intersect one pixel ray with a tangent plane via homogeneous planes.

    ``pixel`` is a continuous screen coordinate (pass px+0.5 for the center
    of pixel px). Returns the local (u, v) point, or None when the ray is
    parallel to the plane or the intersection lies behind the near plane.
    """
    W = camera.world_to_screen_matrix()
    M = W @ H
    x, y = float(pixel[0]), float(pixel[1])
    h_u = -M[0] + x * M[3]
    h_v = -M[1] + y * M[3]
    denom = h_u[0] * h_v[1] - h_u[1] * h_v[0]
    if abs(denom) < kernels.DENOM_FLOOR:
        return None
    u = (h_u[1] * h_v[3] - h_u[3] * h_v[1]) / denom
    v = (h_u[3] * h_v[0] - h_u[0] * h_v[3]) / denom
    world = H[:3, 0] * u + H[:3, 1] * v + H[:3, 3]
    if float(camera.R[2] @ world + camera.t[2]) <= near:
        return None
    return np.array([u, v])


def kernel_weight(x_local, a_hat: float, delta: float, sigma: float, alpha: float):
    """Edge-preserving contribution w = sigmoid(-sigma * logsumexp(delta*d_j)) * alpha.

    Evaluated with a max-shifted log-sum-exp; accepts scalar or array
    ``x_local`` of shape (..., 2).
    """
    from .geometry import edge_functions

    d0, d1, d2 = edge_functions(x_local, a_hat)
    stacked = delta * np.stack([d0, d1, d2], axis=-1)
    mx = stacked.max(axis=-1)
    lse = mx + np.log(np.exp(stacked - mx[..., None]).sum(axis=-1))
    return alpha / (1.0 + np.exp(sigma * lse))


def _plane_dots(camera: PinholeCamera, pu, pv, mu):
    """Precompute H-column dot products against screen-matrix rows 0, 1, 3."""
    W = camera.world_to_screen_matrix()
    r0, r1, r3 = W[0], W[1], W[3]
    return {
        "pu_r0": pu @ r0[:3], "pu_r1": pu @ r1[:3], "pu_r3": pu @ r3[:3],
        "pv_r0": pv @ r0[:3], "pv_r1": pv @ r1[:3], "pv_r3": pv @ r3[:3],
        "mu_r0": mu @ r0[:3] + r0[3],
        "mu_r1": mu @ r1[:3] + r1[3],
        "mu_r3": mu @ r3[:3] + r3[3],
    }, (r0, r1, r3)


def cull_and_prepare(
    soup: TriangleSoup, camera: PinholeCamera, settings: RenderSettings
) -> PreparedSplats:
    """Select visible triangles, build frames, subdivide, bin and sort."""
    n = len(soup)
    tiles_x = (camera.width + settings.tile_size - 1) // settings.tile_size
    tiles_y = (camera.height + settings.tile_size - 1) // settings.tile_size
    n_tiles = tiles_x * tiles_y
    empty = PreparedSplats(
        rows=np.zeros(0, dtype=np.int64),
        frames=batch_frames(np.zeros((0, 3, 3))),
        pu=np.zeros((0, 3)), pv=np.zeros((0, 3)),
        alpha=np.zeros(0), delta=np.zeros(0), sigma=np.zeros(0),
        flip=np.zeros(0),
        dots={k: np.zeros(0) for k in (
            "pu_r0", "pu_r1", "pu_r3", "pv_r0", "pv_r1", "pv_r3",
            "mu_r0", "mu_r1", "mu_r3")},
        tile_offsets=np.zeros(n_tiles + 1, dtype=np.int64),
        tile_splats=np.zeros(0, dtype=np.int64),
        tiles_x=tiles_x, tiles_y=tiles_y,
        skipped_ids=np.zeros(0, dtype=np.int64), capped=False,
    )
    if n == 0:
        return empty

    frames_all = batch_frames(soup.vertices)
    skipped_ids = soup.ids[~frames_all.valid]

    verts_flat = soup.vertices.reshape(-1, 3)
    _, _, vis_flat = project_points(
        camera, verts_flat, near=settings.near, guard_band=settings.guard_band
    )
    tri_visible = vis_flat.reshape(n, 3).any(axis=1) & frames_all.valid
    rows = np.nonzero(tri_visible)[0]
    if rows.size == 0:
        out = replace(empty, skipped_ids=skipped_ids)
        return out

    frames = FrameBatch(
        mu=frames_all.mu[rows], t_u=frames_all.t_u[rows], t_v=frames_all.t_v[rows],
        n=frames_all.n[rows], s_u=frames_all.s_u[rows], s_v=frames_all.s_v[rows],
        a_hat=frames_all.a_hat[rows], m=frames_all.m[rows],
        norm_m=frames_all.norm_m[rows], area=frames_all.area[rows],
        valid=frames_all.valid[rows],
    )
    pu = frames.p_u
    pv = frames.p_v
    alpha = soup.alphas[rows]
    delta = soup.sharpness[rows]
    sigma = soup.smoothness[rows]
    # The normal payload always faces the camera; winding stays free and is
    # fixed post hoc by the orientation pass.
    facing = np.einsum("ij,ij->i", frames.n, camera.center[None] - frames.mu)
    flip = np.where(facing >= 0.0, 1.0, -1.0)

    # Subdivide visible triangles so sorting barycenters track intersections.
    edge_threshold = settings.resolve_edge_threshold(soup)
    sub_verts, sub_parent, capped = subdivide_batch(
        soup.vertices[rows], edge_threshold, cap=settings.subdivision_cap
    )

    # Sub-triangle culling mirrors the parent rule: >= 1 visible vertex.
    sub_flat = sub_verts.reshape(-1, 3)
    sub_screen, sub_z, sub_vis = project_points(
        camera, sub_flat, near=settings.near, guard_band=settings.guard_band
    )
    sub_vis3 = sub_vis.reshape(-1, 3)
    keep_sub = sub_vis3.any(axis=1)
    sub_verts = sub_verts[keep_sub]
    sub_parent = sub_parent[keep_sub]
    sub_screen = sub_screen.reshape(-1, 3, 2)[keep_sub]
    sub_z = sub_z.reshape(-1, 3)[keep_sub]
    if sub_parent.size == 0:
        return replace(
            empty, rows=rows, frames=frames, pu=pu, pv=pv,
            alpha=alpha, delta=delta, sigma=sigma, flip=flip,
            dots=_plane_dots(camera, pu, pv, frames.mu)[0],
            skipped_ids=skipped_ids, capped=capped,
        )

    # Sorting depth: camera z of the sub-triangle barycenter.
    bary = sub_verts.mean(axis=1)
    bary_z = bary @ camera.R[2] + camera.t[2]
    depth_key = np.maximum(bary_z, settings.near).astype(np.float32)
    depth_bits = depth_key.view(np.uint32).astype(np.uint64)

    # Screen bounding box with a kernel-tail margin; sub-triangles touching
    # the near plane conservatively cover every tile.
    tail_local = TAIL_CUT / np.maximum(sigma * delta, 1e-12)
    margin_world = tail_local * np.maximum(frames.s_u, frames.s_v)
    mw = margin_world[sub_parent]
    zmin = sub_z.min(axis=1)
    behind = zmin <= settings.near
    safe_z = np.maximum(zmin - mw, settings.near)
    margin_px = mw * max(camera.fx, camera.fy) / safe_z

    x0 = sub_screen[:, :, 0].min(axis=1) - margin_px
    x1 = sub_screen[:, :, 0].max(axis=1) + margin_px
    y0 = sub_screen[:, :, 1].min(axis=1) - margin_px
    y1 = sub_screen[:, :, 1].max(axis=1) + margin_px
    x0[behind], x1[behind] = 0.0, camera.width
    y0[behind], y1[behind] = 0.0, camera.height

    tx0 = np.clip(np.floor(x0 / settings.tile_size), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor(x1 / settings.tile_size), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor(y0 / settings.tile_size), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor(y1 / settings.tile_size), 0, tiles_y - 1).astype(np.int64)
    off_image = (x1 < 0) | (x0 > camera.width) | (y1 < 0) | (y0 > camera.height)

    nx = np.where(off_image, 0, tx1 - tx0 + 1)
    ny = np.where(off_image, 0, ty1 - ty0 + 1)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return replace(
            empty, rows=rows, frames=frames, pu=pu, pv=pv,
            alpha=alpha, delta=delta, sigma=sigma, flip=flip,
            dots=_plane_dots(camera, pu, pv, frames.mu)[0],
            skipped_ids=skipped_ids, capped=capped,
        )

    entry_sub = np.repeat(np.arange(sub_parent.size), counts)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    rank = np.arange(total) - np.repeat(starts, counts)
    nx_e = np.repeat(np.maximum(nx, 1), counts)
    dx = rank % nx_e
    dy = rank // nx_e
    tile_of_entry = (
        (np.repeat(ty0, counts) + dy) * tiles_x + np.repeat(tx0, counts) + dx
    )

    keys = (tile_of_entry.astype(np.uint64) << np.uint64(32)) | depth_bits[entry_sub]
    order = kernels.radix_argsort_u64(keys)
    tile_sorted = tile_of_entry[order]
    parent_sorted = sub_parent[entry_sub[order]]
    keep = kernels.dedup_first_per_tile(tile_sorted, parent_sorted, rows.size)
    tile_final = tile_sorted[keep]
    splat_final = parent_sorted[keep]
    tile_counts = np.bincount(tile_final, minlength=n_tiles)
    tile_offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(tile_counts, out=tile_offsets[1:])

    dots, _ = _plane_dots(camera, pu, pv, frames.mu)
    return PreparedSplats(
        rows=rows, frames=frames, pu=pu, pv=pv,
        alpha=alpha, delta=delta, sigma=sigma, flip=flip, dots=dots,
        tile_offsets=tile_offsets, tile_splats=splat_final,
        tiles_x=tiles_x, tiles_y=tiles_y,
        skipped_ids=skipped_ids, capped=capped,
    )


def render(
    soup: TriangleSoup,
    camera: PinholeCamera,
    settings: RenderSettings | None = None,
    prepared: PreparedSplats | None = None,
) -> RenderTarget:
    """Composite depth / normal / alpha maps front-to-back (Eq.-style
    over-compositing with transmittance early exit)."""
    settings = settings or RenderSettings()
    prep = prepared if prepared is not None else cull_and_prepare(soup, camera, settings)
    h, w = camera.height, camera.width
    depth = np.zeros((h, w), dtype=np.float64)
    normal = np.zeros((h, w, 3), dtype=np.float64)
    alpha_img = np.zeros((h, w), dtype=np.float64)
    gamma_splat = np.zeros(prep.rows.size, dtype=np.float64)
    if prep.tile_splats.size:
        kernels.forward_triangle_tiles(
            w, h, settings.tile_size, prep.tiles_x,
            prep.tile_offsets, prep.tile_splats,
            prep.pu, prep.pv, prep.frames.mu, prep.frames.a_hat,
            prep.alpha, prep.delta, prep.sigma, prep.n_render,
            prep.dots["pu_r0"], prep.dots["pu_r1"], prep.dots["pu_r3"],
            prep.dots["pv_r0"], prep.dots["pv_r1"], prep.dots["pv_r3"],
            prep.dots["mu_r0"], prep.dots["mu_r1"], prep.dots["mu_r3"],
            camera.center, camera.R[2].copy(), float(camera.t[2]),
            settings.near, settings.transmittance_cutoff,
            depth, normal, alpha_img, gamma_splat,
        )
    gamma = np.zeros(len(soup), dtype=np.float64)
    gamma[prep.rows] = gamma_splat
    visible = np.zeros(len(soup), dtype=bool)
    visible[prep.rows] = True
    return RenderTarget(
        depth=depth, normal=normal, alpha=alpha_img,
        gamma_partial=gamma, visible=visible, skipped_ids=prep.skipped_ids,
    )


def backward(
    soup: TriangleSoup,
    camera: PinholeCamera,
    settings: RenderSettings | None = None,
    grad_depth: np.ndarray | None = None,
    grad_normal: np.ndarray | None = None,
    grad_alpha: np.ndarray | None = None,
    prepared: PreparedSplats | None = None,
) -> GradientBuffers:
    """Exact gradients of the composited outputs w.r.t. all triangle
    parameters, replaying the forward traversal.

    Raises:
        NonFiniteGradient: when any upstream gradient contains NaN/Inf.
    """
    settings = settings or RenderSettings()
    h, w = camera.height, camera.width
    if grad_depth is None:
        grad_depth = np.zeros((h, w))
    if grad_normal is None:
        grad_normal = np.zeros((h, w, 3))
    if grad_alpha is None:
        grad_alpha = np.zeros((h, w))
    for name, g in (("depth", grad_depth), ("normal", grad_normal), ("alpha", grad_alpha)):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"upstream {name} gradient contains NaN/Inf")

    prep = prepared if prepared is not None else cull_and_prepare(soup, camera, settings)
    grads = GradientBuffers.zeros(len(soup))
    p = prep.rows.size
    if p == 0 or prep.tile_splats.size == 0:
        return grads

    g_pu = np.zeros((p, 3))
    g_pv = np.zeros((p, 3))
    g_mu = np.zeros((p, 3))
    g_n = np.zeros((p, 3))
    g_a_hat = np.zeros(p)
    g_alpha = np.zeros(p)
    g_delta = np.zeros(p)
    g_sigma = np.zeros(p)
    W = camera.world_to_screen_matrix()
    kernels.backward_triangle_tiles(
        w, h, settings.tile_size, prep.tiles_x,
        prep.tile_offsets, prep.tile_splats,
        prep.pu, prep.pv, prep.frames.mu, prep.frames.a_hat,
        prep.alpha, prep.delta, prep.sigma, prep.n_render,
        prep.dots["pu_r0"], prep.dots["pu_r1"], prep.dots["pu_r3"],
        prep.dots["pv_r0"], prep.dots["pv_r1"], prep.dots["pv_r3"],
        prep.dots["mu_r0"], prep.dots["mu_r1"], prep.dots["mu_r3"],
        camera.center, camera.R[2].copy(), float(camera.t[2]),
        settings.near, settings.transmittance_cutoff,
        W[0].copy(), W[1].copy(), W[3].copy(),
        np.ascontiguousarray(grad_depth, dtype=np.float64),
        np.ascontiguousarray(grad_normal, dtype=np.float64),
        np.ascontiguousarray(grad_alpha, dtype=np.float64),
        g_pu, g_pv, g_mu, g_n, g_a_hat, g_alpha, g_delta, g_sigma,
    )

    # P_v = s_v * t_v splits into scale and direction cotangents; the normal
    # cotangent arrives w.r.t. the camera-facing normal, so undo the flip.
    g_s_v = np.einsum("ij,ij->i", prep.frames.t_v, g_pv)
    g_t_v = prep.frames.s_v[:, None] * g_pv
    g_vertices = frame_backward(
        soup.vertices[prep.rows], prep.frames,
        g_mu=g_mu, g_e=g_pu, g_t_v=g_t_v, g_n=g_n * prep.flip[:, None],
        g_s_v=g_s_v, g_a_hat=g_a_hat,
    )
    grads.vertices[prep.rows] = g_vertices
    alphas = prep.alpha
    grads.opacity_logit[prep.rows] = g_alpha * alphas * (1.0 - alphas)
    grads.sharpness_log[prep.rows] = g_delta * prep.delta
    grads.smoothness_log[prep.rows] = g_sigma * prep.sigma
    return grads
