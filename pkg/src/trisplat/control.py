"""Adaptive density control of the triangle soup.

Splitting: an edge qualifies when the directional-derivative difference of
the surfel density field across it exceeds a threshold; the longest
qualifying edge of each triangle is bisected (at most one split per triangle
per pass). Pruning removes triangles whose opacity and accumulated
contribution are both low, or that were never observed. Normal orientation
flips a triangle's winding when it faces fewer than half of the cameras that
saw it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import ZeroLengthEdge
from .geometry import _bisect_edge_vertices, batch_edge_lengths, batch_frames
from .soup import AppearanceModel, TriangleSoup
from .surfels import SurfelBatch


@dataclass
class DensityConfig:
    grad_threshold: float = 1e-5
    prune_alpha: float = 0.5
    prune_gamma: float = 2.0
    prune_interval: int = 2000
    entropy_window: int = 5000

    def __post_init__(self):
        for name in ("grad_threshold", "prune_alpha", "prune_gamma",
                     "prune_interval", "entropy_window"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class ContributionStats:
    """Per-triangle contribution accumulated over a prune interval.

    gamma is the mean over observed images of the summed blended pixel
    weights; seen counts the images in which the triangle survived culling.
    Rows align with the soup and must be remapped alongside it.
    """

    gamma_sum: np.ndarray
    seen: np.ndarray

    @staticmethod
    def zeros(n: int) -> "ContributionStats":
        return ContributionStats(gamma_sum=np.zeros(n), seen=np.zeros(n, dtype=np.int64))

    def accumulate(self, gamma_partial: np.ndarray, visible: np.ndarray) -> None:
        self.gamma_sum += gamma_partial
        self.seen += visible.astype(np.int64)

    def gamma(self) -> np.ndarray:
        return self.gamma_sum / np.maximum(self.seen, 1)

    def reset(self) -> None:
        self.gamma_sum[:] = 0.0
        self.seen[:] = 0

    def remap(self, index_map: np.ndarray) -> None:
        keep = index_map >= 0
        new_gamma = np.zeros(index_map.size)
        new_seen = np.zeros(index_map.size, dtype=np.int64)
        new_gamma[keep] = self.gamma_sum[index_map[keep]]
        new_seen[keep] = self.seen[index_map[keep]]
        self.gamma_sum = new_gamma
        self.seen = new_seen


@njit(cache=True)
def _field_gradient_kernel(points, centers, t_u, t_v, n, inv_su2, inv_sv2, inv_sn2, opacity, out):
    for p in range(points.shape[0]):
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for g in range(centers.shape[0]):
            dx = points[p, 0] - centers[g, 0]
            dy = points[p, 1] - centers[g, 1]
            dz = points[p, 2] - centers[g, 2]
            cu = dx * t_u[g, 0] + dy * t_u[g, 1] + dz * t_u[g, 2]
            cv = dx * t_v[g, 0] + dy * t_v[g, 1] + dz * t_v[g, 2]
            cn = dx * n[g, 0] + dy * n[g, 1] + dz * n[g, 2]
            quad = cu * cu * inv_su2[g] + cv * cv * inv_sv2[g] + cn * cn * inv_sn2[g]
            if quad > 60.0:
                continue
            val = opacity[g] * np.exp(-0.5 * quad)
            # Sigma^{-1} (p - mu) in the world frame.
            su = cu * inv_su2[g]
            sv = cv * inv_sv2[g]
            sn = cn * inv_sn2[g]
            gx -= val * (su * t_u[g, 0] + sv * t_v[g, 0] + sn * n[g, 0])
            gy -= val * (su * t_u[g, 1] + sv * t_v[g, 1] + sn * n[g, 1])
            gz -= val * (su * t_u[g, 2] + sv * t_v[g, 2] + sn * n[g, 2])
        out[p, 0] = gx
        out[p, 1] = gy
        out[p, 2] = gz


def field_gradient(
    surfels: SurfelBatch, points: np.ndarray, normal_sigma_factor: float = 0.01
) -> np.ndarray:
    """Analytic spatial gradient of the unnormalized surfel density field
    f(p) = sum_i opacity_i exp(-1/2 (p-mu_i)^T Sigma_i^{-1} (p-mu_i)).

    Surfel covariances get a thin normal-direction standard deviation of
    ``normal_sigma_factor`` times the mean tangent scale so the field is
    differentiable off-surface.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = np.zeros_like(points)
    if len(surfels) == 0:
        return out
    eps_n = normal_sigma_factor * 0.5 * (surfels.s_u + surfels.s_v)
    _field_gradient_kernel(
        points, surfels.center, surfels.t_u, surfels.t_v, surfels.n,
        1.0 / surfels.s_u**2, 1.0 / surfels.s_v**2, 1.0 / eps_n**2,
        surfels.opacity, out,
    )
    return out


def edge_refinement_score(q0: np.ndarray, q1: np.ndarray, surfels: SurfelBatch) -> float:
    """Directional-derivative difference across an edge:
    (grad f(q1) - grad f(q0)) . (q1 - q0) / |q1 - q0|."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    d = q1 - q0
    norm = float(np.linalg.norm(d))
    if norm == 0.0:
        raise ZeroLengthEdge("edge endpoints coincide")
    g = field_gradient(surfels, np.stack([q0, q1]))
    return float((g[1] - g[0]) @ (d / norm))


@dataclass
class SplitReport:
    n_before: int
    n_after: int
    n_split: int
    grad_threshold: float


@dataclass
class PruneReport:
    n_before: int
    n_after: int
    n_low: int
    n_unseen: int


@dataclass
class OrientReport:
    n_flipped: int
    n_untouched: int


def split_pass(
    soup: TriangleSoup,
    surfels: SurfelBatch,
    config: DensityConfig,
) -> tuple[TriangleSoup, np.ndarray, SplitReport]:
    """Bisect, per triangle, the longest edge whose refinement score exceeds
    the threshold. Children copy opacity/sharpness/smoothness, inherit the
    appearance attachment (offsets re-read relative to the child barycenter)
    and receive fresh ids.

    Returns (new_soup, index_map, report); index_map[i_new] = old row or -1.
    """
    n = len(soup)
    report = SplitReport(n_before=n, n_after=n, n_split=0, grad_threshold=config.grad_threshold)
    if n == 0 or len(surfels) == 0:
        return soup.copy(), np.arange(n, dtype=np.int64), report

    verts = soup.vertices
    grads = field_gradient(surfels, verts.reshape(-1, 3)).reshape(n, 3, 3)
    lengths = batch_edge_lengths(verts)  # (N,3) edges (01, 12, 20)
    edge_pairs = ((0, 1), (1, 2), (2, 0))
    scores = np.zeros((n, 3))
    for j, (ia, ib) in enumerate(edge_pairs):
        d = verts[:, ib] - verts[:, ia]
        ln = np.maximum(lengths[:, j], 1e-30)
        scores[:, j] = np.einsum("ij,ij->i", grads[:, ib] - grads[:, ia], d) / ln

    valid = batch_frames(verts).valid
    qualifies = (np.abs(scores) > config.grad_threshold) & valid[:, None]
    any_q = qualifies.any(axis=1)
    # Longest qualifying edge per triangle.
    masked_len = np.where(qualifies, lengths, -1.0)
    edge_choice = np.argmax(masked_len, axis=1)

    split_rows = np.nonzero(any_q)[0]
    keep_rows = np.nonzero(~any_q)[0]
    if split_rows.size == 0:
        return soup.copy(), np.arange(n, dtype=np.int64), report

    child_verts = []
    child_parent_rows = []
    for j in range(3):
        rows_j = split_rows[edge_choice[split_rows] == j]
        if rows_j.size == 0:
            continue
        va, vb = _bisect_edge_vertices_batch(verts[rows_j], j)
        child_verts.append(va)
        child_verts.append(vb)
        child_parent_rows.append(rows_j)
        child_parent_rows.append(rows_j)
    child_verts = np.concatenate(child_verts, axis=0)
    child_parent = np.concatenate(child_parent_rows, axis=0)
    order = np.argsort(child_parent, kind="stable")
    child_verts = child_verts[order]
    child_parent = child_parent[order]

    kept = soup.select(keep_rows)
    n_children = child_verts.shape[0]
    next_id = soup.next_id()
    children = TriangleSoup(
        vertices=child_verts,
        opacity_logit=soup.opacity_logit[child_parent].copy(),
        sharpness_log=soup.sharpness_log[child_parent].copy(),
        smoothness_log=soup.smoothness_log[child_parent].copy(),
        ids=np.arange(next_id, next_id + n_children, dtype=np.int64),
        parent_ids=soup.ids[child_parent].copy(),
        appearance=soup.appearance.select(child_parent),
    )
    new_soup = TriangleSoup(
        vertices=np.concatenate([kept.vertices, children.vertices]),
        opacity_logit=np.concatenate([kept.opacity_logit, children.opacity_logit]),
        sharpness_log=np.concatenate([kept.sharpness_log, children.sharpness_log]),
        smoothness_log=np.concatenate([kept.smoothness_log, children.smoothness_log]),
        ids=np.concatenate([kept.ids, children.ids]),
        parent_ids=np.concatenate([kept.parent_ids, children.parent_ids]),
        appearance=AppearanceModel.concatenate([kept.appearance, children.appearance]),
    )
    index_map = np.concatenate(
        [keep_rows, np.full(n_children, -1, dtype=np.int64)]
    )
    report = SplitReport(
        n_before=n, n_after=len(new_soup), n_split=int(split_rows.size),
        grad_threshold=config.grad_threshold,
    )
    return new_soup, index_map, report


def _bisect_edge_vertices_batch(verts: np.ndarray, edge_index: int):
    """Batched :func:`trisplat.geometry._bisect_edge_vertices`."""
    pairs = ((0, 1), (1, 2), (2, 0))
    ia, ib = pairs[edge_index]
    ic = 3 - ia - ib
    mid = 0.5 * (verts[:, ia] + verts[:, ib])
    a = np.stack([verts[:, ia], mid, verts[:, ic]], axis=1)
    b = np.stack([mid, verts[:, ib], verts[:, ic]], axis=1)
    return a, b


def prune_pass(
    soup: TriangleSoup,
    stats: ContributionStats,
    config: DensityConfig,
) -> tuple[TriangleSoup, np.ndarray, PruneReport]:
    """Remove triangles with (alpha < prune_alpha AND gamma < prune_gamma) or
    never observed (seen == 0). Returns (new_soup, index_map, report); the
    caller owns resetting the stats."""
    n = len(soup)
    gamma = stats.gamma()
    alphas = soup.alphas
    low = (alphas < config.prune_alpha) & (gamma < config.prune_gamma)
    unseen = stats.seen == 0
    drop = low | unseen
    keep_rows = np.nonzero(~drop)[0]
    new_soup = soup.select(keep_rows)
    report = PruneReport(
        n_before=n, n_after=len(new_soup),
        n_low=int((low & ~unseen).sum()), n_unseen=int(unseen.sum()),
    )
    return new_soup, keep_rows.astype(np.int64), report


def orient_normals(
    soup: TriangleSoup,
    camera_centers: np.ndarray,
    visible: np.ndarray,
) -> tuple[TriangleSoup, OrientReport]:
    """Flip the winding (swap p1 and p2) of triangles facing fewer than half
    of the cameras that observed them; exact ties keep the current
    orientation, and triangles with an empty visible set are untouched.

    ``visible`` is (n_triangles, n_cameras) bool from rendering passes.
    """
    soup = soup.copy()
    n = len(soup)
    if n == 0 or camera_centers.size == 0:
        return soup, OrientReport(n_flipped=0, n_untouched=n)
    frames = batch_frames(soup.vertices)
    to_cam = camera_centers[None, :, :] - frames.mu[:, None, :]  # (N, C, 3)
    facing = np.einsum("nci,ni->nc", to_cam, frames.n) > 0.0
    vis = np.asarray(visible, dtype=bool)
    n_vis = vis.sum(axis=1)
    n_front = (facing & vis).sum(axis=1)
    flip = frames.valid & (n_vis > 0) & (2 * n_front < n_vis)
    rows = np.nonzero(flip)[0]
    if rows.size:
        soup.vertices[rows] = soup.vertices[rows][:, [0, 2, 1], :]
    return soup, OrientReport(
        n_flipped=int(rows.size), n_untouched=int((n_vis == 0).sum())
    )
