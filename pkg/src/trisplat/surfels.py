"""View-renderable surfel Gaussians spawned from triangles.

Each triangle spawns ``k`` flat Gaussians: centers are the barycenter plus a
learnable offset (scaled per-axis and expressed in the triangle's tangent
frame), the surfel basis is the triangle frame rotated in-plane, and color,
opacity and tangent extents are direct per-offset attributes. The ray-splat
machinery and compositing are shared with the triangle renderer; only the
kernel differs: w = opacity * exp(-(u^2 + v^2) / 2).

Gradients flow back to every attachment field and to the parent triangle
vertices through the barycenter and frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .camera import PinholeCamera
from .errors import NonFiniteGradient
from .geometry import FrameBatch, batch_frames, frame_backward
from .renderer import RenderSettings, _plane_dots
from .soup import TriangleSoup

# Binning bbox cut in units of the surfel extent; w there is ~3.7e-6.
RADIUS_CUT = 5.0


def _facing_flip(batch: "SurfelBatch", camera: PinholeCamera, sel: np.ndarray) -> np.ndarray:
    facing = np.einsum(
        "ij,ij->i", batch.n[sel], camera.center[None] - batch.center[sel]
    )
    return np.where(facing >= 0.0, 1.0, -1.0)


def _facing_normals(batch: "SurfelBatch", camera: PinholeCamera, sel: np.ndarray) -> np.ndarray:
    return batch.n[sel] * _facing_flip(batch, camera, sel)[:, None]


@dataclass
class SurfelBatch:
    """Flattened spawned Gaussians (G = sum of k over spawning triangles)."""

    center: np.ndarray   # (G, 3)
    t_u: np.ndarray      # (G, 3) rotated in-plane basis
    t_v: np.ndarray      # (G, 3)
    n: np.ndarray        # (G, 3) parent triangle normal
    s_u: np.ndarray      # (G,)
    s_v: np.ndarray      # (G,)
    opacity: np.ndarray  # (G,)
    color: np.ndarray    # (G, 3) in [0, 1]
    parent_row: np.ndarray    # (G,) soup row
    offset_index: np.ndarray  # (G,) 0..k-1
    frames: FrameBatch        # parent frames (per spawning triangle)
    spawn_rows: np.ndarray    # (S,) soup rows that spawned (valid frames)

    @property
    def p_u(self) -> np.ndarray:
        return self.t_u * self.s_u[:, None]

    @property
    def p_v(self) -> np.ndarray:
        return self.t_v * self.s_v[:, None]

    def __len__(self) -> int:
        return self.center.shape[0]

    def covariances(self, normal_sigma_factor: float = 0.01) -> np.ndarray:
        """World 3x3 covariances; the normal direction gets a thin variance
        of (normal_sigma_factor * mean tangent scale)^2 so the density field
        is well-defined off-surface."""
        eps_n = normal_sigma_factor * 0.5 * (self.s_u + self.s_v)
        return (
            (self.s_u**2)[:, None, None] * np.einsum("gi,gj->gij", self.t_u, self.t_u)
            + (self.s_v**2)[:, None, None] * np.einsum("gi,gj->gij", self.t_v, self.t_v)
            + (eps_n**2)[:, None, None] * np.einsum("gi,gj->gij", self.n, self.n)
        )


@dataclass
class AppearanceTarget:
    color: np.ndarray   # (H, W, 3)
    depth: np.ndarray   # (H, W)
    normal: np.ndarray  # (H, W, 3)
    alpha: np.ndarray   # (H, W)


@dataclass
class AppearanceGradients:
    """Gradients for attachment fields plus the parent triangle vertices."""

    offsets: np.ndarray        # (N, k, 3)
    offset_scale: np.ndarray   # (N, 3)
    color_logit: np.ndarray    # (N, k, 3)
    opacity_logit: np.ndarray  # (N, k)
    scale_log: np.ndarray      # (N, k, 2)
    rotation: np.ndarray       # (N, k)
    vertices: np.ndarray       # (N, 3, 3)

    @staticmethod
    def zeros(n: int, k: int) -> "AppearanceGradients":
        return AppearanceGradients(
            offsets=np.zeros((n, k, 3)),
            offset_scale=np.zeros((n, 3)),
            color_logit=np.zeros((n, k, 3)),
            opacity_logit=np.zeros((n, k)),
            scale_log=np.zeros((n, k, 2)),
            rotation=np.zeros((n, k)),
            vertices=np.zeros((n, 3, 3)),
        )


def spawn_gaussians(soup: TriangleSoup, frames: FrameBatch | None = None) -> SurfelBatch:
    """Spawn k surfels per triangle; degenerate triangles spawn nothing.

    center = mu + (O ⊙ l) expressed in the (t_u, t_v, n) frame; the surfel
    basis is the frame rotated in-plane by the per-offset angle.
    """
    app = soup.appearance
    k = app.k
    if frames is None:
        frames = batch_frames(soup.vertices)
    rows = np.nonzero(frames.valid)[0]
    s = rows.size
    sub = FrameBatch(
        mu=frames.mu[rows], t_u=frames.t_u[rows], t_v=frames.t_v[rows],
        n=frames.n[rows], s_u=frames.s_u[rows], s_v=frames.s_v[rows],
        a_hat=frames.a_hat[rows], m=frames.m[rows], norm_m=frames.norm_m[rows],
        area=frames.area[rows], valid=frames.valid[rows],
    )
    o = app.offsets[rows] * app.offset_scale[rows][:, None, :]  # (S, k, 3)
    center = (
        sub.mu[:, None, :]
        + o[:, :, 0:1] * sub.t_u[:, None, :]
        + o[:, :, 1:2] * sub.t_v[:, None, :]
        + o[:, :, 2:3] * sub.n[:, None, :]
    ).reshape(-1, 3)
    theta = app.rotation[rows]
    c, sn = np.cos(theta), np.sin(theta)
    t_u = (c[..., None] * sub.t_u[:, None, :] + sn[..., None] * sub.t_v[:, None, :]).reshape(-1, 3)
    t_v = (-sn[..., None] * sub.t_u[:, None, :] + c[..., None] * sub.t_v[:, None, :]).reshape(-1, 3)
    n = np.repeat(sub.n, k, axis=0)
    scales = np.exp(app.scale_log[rows]).reshape(-1, 2)
    return SurfelBatch(
        center=center, t_u=t_u, t_v=t_v, n=n,
        s_u=scales[:, 0], s_v=scales[:, 1],
        opacity=1.0 / (1.0 + np.exp(-app.opacity_logit[rows])).reshape(-1),
        color=(1.0 / (1.0 + np.exp(-app.color_logit[rows]))).reshape(-1, 3),
        parent_row=np.repeat(rows, k),
        offset_index=np.tile(np.arange(k), s),
        frames=sub,
        spawn_rows=rows,
    )


@dataclass
class _SurfelPlan:
    sel: np.ndarray          # indices of binned surfels within the batch
    dots: dict
    tile_offsets: np.ndarray
    tile_splats: np.ndarray
    tiles_x: int
    tiles_y: int


def _bin_surfels(batch: SurfelBatch, camera: PinholeCamera, settings: RenderSettings) -> _SurfelPlan:
    tiles_x = (camera.width + settings.tile_size - 1) // settings.tile_size
    tiles_y = (camera.height + settings.tile_size - 1) // settings.tile_size
    n_tiles = tiles_x * tiles_y
    g = len(batch)
    empty = _SurfelPlan(
        sel=np.zeros(0, dtype=np.int64), dots={},
        tile_offsets=np.zeros(n_tiles + 1, dtype=np.int64),
        tile_splats=np.zeros(0, dtype=np.int64),
        tiles_x=tiles_x, tiles_y=tiles_y,
    )
    if g == 0:
        return empty
    cam_pts = batch.center @ camera.R.T + camera.t
    z = cam_pts[:, 2]
    r_world = RADIUS_CUT * np.maximum(batch.s_u, batch.s_v)
    in_front = z > settings.near
    safe_z = np.maximum(z - r_world, settings.near)
    radius_px = np.maximum(camera.fx, camera.fy) * r_world / safe_z
    sx = camera.fx * cam_pts[:, 0] / np.where(in_front, z, 1.0) + camera.cx
    sy = camera.fy * cam_pts[:, 1] / np.where(in_front, z, 1.0) + camera.cy
    x0, x1 = sx - radius_px, sx + radius_px
    y0, y1 = sy - radius_px, sy + radius_px
    # Surfels straddling the near plane conservatively cover the image.
    straddle = in_front & (z - r_world <= settings.near)
    x0[straddle], x1[straddle] = 0.0, camera.width
    y0[straddle], y1[straddle] = 0.0, camera.height
    on_image = in_front & (x1 >= 0) & (x0 <= camera.width) & (y1 >= 0) & (y0 <= camera.height)
    sel = np.nonzero(on_image)[0]
    if sel.size == 0:
        return empty

    tx0 = np.clip(np.floor(x0[sel] / settings.tile_size), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor(x1[sel] / settings.tile_size), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor(y0[sel] / settings.tile_size), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor(y1[sel] / settings.tile_size), 0, tiles_y - 1).astype(np.int64)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = nx * ny
    total = int(counts.sum())
    entry_sel = np.repeat(np.arange(sel.size), counts)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    rank = np.arange(total) - np.repeat(starts, counts)
    nx_e = np.repeat(nx, counts)
    dx = rank % nx_e
    dy = rank // nx_e
    tile_of_entry = (np.repeat(ty0, counts) + dy) * tiles_x + np.repeat(tx0, counts) + dx

    depth_bits = np.maximum(z[sel], settings.near).astype(np.float32).view(np.uint32).astype(np.uint64)
    keys = (tile_of_entry.astype(np.uint64) << np.uint64(32)) | depth_bits[entry_sel]
    order = kernels.radix_argsort_u64(keys)
    tile_sorted = tile_of_entry[order]
    splat_sorted = entry_sel[order]  # indices into sel
    tile_counts = np.bincount(tile_sorted, minlength=n_tiles)
    tile_offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(tile_counts, out=tile_offsets[1:])

    pu = batch.p_u[sel]
    pv = batch.p_v[sel]
    dots, _ = _plane_dots(camera, pu, pv, batch.center[sel])
    return _SurfelPlan(
        sel=sel, dots=dots, tile_offsets=tile_offsets,
        tile_splats=splat_sorted, tiles_x=tiles_x, tiles_y=tiles_y,
    )


def render_appearance(
    batch: SurfelBatch,
    camera: PinholeCamera,
    settings: RenderSettings | None = None,
    plan: _SurfelPlan | None = None,
) -> AppearanceTarget:
    settings = settings or RenderSettings()
    plan = plan if plan is not None else _bin_surfels(batch, camera, settings)
    h, w = camera.height, camera.width
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    normal = np.zeros((h, w, 3))
    alpha = np.zeros((h, w))
    if plan.tile_splats.size:
        sel = plan.sel
        n_flip = _facing_normals(batch, camera, sel)
        kernels.forward_surfel_tiles(
            w, h, settings.tile_size, plan.tiles_x,
            plan.tile_offsets, plan.tile_splats,
            batch.p_u[sel], batch.p_v[sel], batch.center[sel],
            batch.opacity[sel], batch.color[sel], n_flip,
            plan.dots["pu_r0"], plan.dots["pu_r1"], plan.dots["pu_r3"],
            plan.dots["pv_r0"], plan.dots["pv_r1"], plan.dots["pv_r3"],
            plan.dots["mu_r0"], plan.dots["mu_r1"], plan.dots["mu_r3"],
            camera.center, camera.R[2].copy(), float(camera.t[2]),
            settings.near, settings.transmittance_cutoff,
            color, depth, normal, alpha,
        )
    return AppearanceTarget(color=color, depth=depth, normal=normal, alpha=alpha)


def backward_appearance(
    soup: TriangleSoup,
    batch: SurfelBatch,
    camera: PinholeCamera,
    settings: RenderSettings | None = None,
    grad_color: np.ndarray | None = None,
    grad_depth: np.ndarray | None = None,
    grad_normal: np.ndarray | None = None,
    grad_alpha: np.ndarray | None = None,
    plan: _SurfelPlan | None = None,
) -> AppearanceGradients:
    """Chain composited-output gradients to attachment fields and parent
    triangle vertices (through the barycenter and tangent frame)."""
    settings = settings or RenderSettings()
    h, w = camera.height, camera.width
    if grad_color is None:
        grad_color = np.zeros((h, w, 3))
    if grad_depth is None:
        grad_depth = np.zeros((h, w))
    if grad_normal is None:
        grad_normal = np.zeros((h, w, 3))
    if grad_alpha is None:
        grad_alpha = np.zeros((h, w))
    for name, arr in (
        ("color", grad_color), ("depth", grad_depth),
        ("normal", grad_normal), ("alpha", grad_alpha),
    ):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteGradient(f"upstream {name} gradient contains NaN/Inf")

    app = soup.appearance
    out = AppearanceGradients.zeros(len(soup), app.k)
    plan = plan if plan is not None else _bin_surfels(batch, camera, settings)
    if plan.tile_splats.size == 0:
        return out
    sel = plan.sel
    m = sel.size
    g_pu = np.zeros((m, 3))
    g_pv = np.zeros((m, 3))
    g_center = np.zeros((m, 3))
    g_n = np.zeros((m, 3))
    g_op = np.zeros(m)
    g_col = np.zeros((m, 3))
    W = camera.world_to_screen_matrix()
    flip = _facing_flip(batch, camera, sel)
    kernels.backward_surfel_tiles(
        w, h, settings.tile_size, plan.tiles_x,
        plan.tile_offsets, plan.tile_splats,
        batch.p_u[sel], batch.p_v[sel], batch.center[sel],
        batch.opacity[sel], batch.color[sel], batch.n[sel] * flip[:, None],
        plan.dots["pu_r0"], plan.dots["pu_r1"], plan.dots["pu_r3"],
        plan.dots["pv_r0"], plan.dots["pv_r1"], plan.dots["pv_r3"],
        plan.dots["mu_r0"], plan.dots["mu_r1"], plan.dots["mu_r3"],
        camera.center, camera.R[2].copy(), float(camera.t[2]),
        settings.near, settings.transmittance_cutoff,
        W[0].copy(), W[1].copy(), W[3].copy(),
        np.ascontiguousarray(grad_color, dtype=np.float64),
        np.ascontiguousarray(grad_depth, dtype=np.float64),
        np.ascontiguousarray(grad_normal, dtype=np.float64),
        np.ascontiguousarray(grad_alpha, dtype=np.float64),
        g_pu, g_pv, g_center, g_n, g_op, g_col,
    )

    rows = batch.parent_row[sel]
    offs = batch.offset_index[sel]
    # The normal payload was camera-facing; undo the flip before chaining.
    g_n = g_n * flip[:, None]

    # Direct attributes.
    op = batch.opacity[sel]
    np.add.at(out.opacity_logit, (rows, offs), g_op * op * (1.0 - op))
    col = batch.color[sel]
    np.add.at(out.color_logit, (rows, offs), g_col * col * (1.0 - col))

    # Tangent extents and in-plane rotation: P = s * t'.
    g_su = np.einsum("gi,gi->g", batch.t_u[sel], g_pu)
    g_tu_rot = batch.s_u[sel][:, None] * g_pu
    g_sv = np.einsum("gi,gi->g", batch.t_v[sel], g_pv)
    g_tv_rot = batch.s_v[sel][:, None] * g_pv
    np.add.at(out.scale_log, (rows, offs, 0), g_su * batch.s_u[sel])
    np.add.at(out.scale_log, (rows, offs, 1), g_sv * batch.s_v[sel])
    g_theta = np.einsum("gi,gi->g", g_tu_rot, batch.t_v[sel]) - np.einsum(
        "gi,gi->g", g_tv_rot, batch.t_u[sel]
    )
    np.add.at(out.rotation, (rows, offs), g_theta)

    theta = app.rotation[rows, offs]
    c, sn = np.cos(theta), np.sin(theta)
    g_tu_parent = c[:, None] * g_tu_rot - sn[:, None] * g_tv_rot
    g_tv_parent = sn[:, None] * g_tu_rot + c[:, None] * g_tv_rot

    # Spawn chain: center = mu + (O*l) in the parent frame.
    spawn_pos = np.searchsorted(batch.spawn_rows, rows)
    fr = batch.frames
    tu_p = fr.t_u[spawn_pos]
    tv_p = fr.t_v[spawn_pos]
    n_p = fr.n[spawn_pos]
    o = app.offsets[rows, offs] * app.offset_scale[rows]  # (m, 3)
    g_o = np.stack(
        [
            np.einsum("gi,gi->g", tu_p, g_center),
            np.einsum("gi,gi->g", tv_p, g_center),
            np.einsum("gi,gi->g", n_p, g_center),
        ],
        axis=1,
    )
    g_tu_parent += o[:, 0:1] * g_center
    g_tv_parent += o[:, 1:2] * g_center
    g_n_parent = g_n + o[:, 2:3] * g_center
    np.add.at(out.offsets, (rows, offs), g_o * app.offset_scale[rows])
    np.add.at(out.offset_scale, rows, g_o * app.offsets[rows, offs])

    # Aggregate frame cotangents per spawning triangle, then chain to vertices.
    s = batch.spawn_rows.size
    agg_mu = np.zeros((s, 3))
    agg_tu = np.zeros((s, 3))
    agg_tv = np.zeros((s, 3))
    agg_n = np.zeros((s, 3))
    np.add.at(agg_mu, spawn_pos, g_center)
    np.add.at(agg_tu, spawn_pos, g_tu_parent)
    np.add.at(agg_tv, spawn_pos, g_tv_parent)
    np.add.at(agg_n, spawn_pos, g_n_parent)
    g_verts = frame_backward(
        soup.vertices[batch.spawn_rows], fr,
        g_mu=agg_mu, g_t_u=agg_tu, g_t_v=agg_tv, g_n=agg_n,
    )
    out.vertices[batch.spawn_rows] = g_verts
    return out
