"""Triangle geometry core: tangent frames, local coordinates, edge functions,
and midpoint subdivision.

Every triangle owns a local tangent frame anchored at its barycenter. The
first vertex always sits at local coordinate (1, 0); the winding convention
places the second vertex at v = +1, so the local vertex triple is

    (1, 0), (a_hat, 1), (-1 - a_hat, -1)

which sums to zero (the barycenter is the local origin) and has positive
signed area (counterclockwise in the (t_u, t_v) plane). The three signed
edge forms vanish on their edges and equal -1 at the origin.

All scalar operations have batched counterparts (``batch_*``) used by the
renderer; both run in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateTriangle

DEFAULT_EPS_AREA = 1e-12
DEFAULT_EPS_SCALE = 1e-9

# Edge slot j spans vertices (j, j+1 mod 3): e0 = p0-p1, e1 = p1-p2, e2 = p2-p0.
_EDGE_VERTEX_PAIRS = ((0, 1), (1, 2), (2, 0))


@dataclass
class TrianglePrimitive:
    """A learnable world-space triangle.

    ``opacity_logit``, ``sharpness_log`` and ``smoothness_log`` reparameterize
    alpha = sigmoid(opacity_logit) in (0,1), delta = exp(sharpness_log) > 0 and
    sigma = exp(smoothness_log) > 0, so the constraints hold by construction.
    """

    p0: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    opacity_logit: float = 0.0
    sharpness_log: float = math.log(20.0)
    smoothness_log: float = math.log(5.0)
    id: int = -1
    parent_id: int | None = None
    appearance: object | None = None

    def __post_init__(self):
        self.p0 = np.asarray(self.p0, dtype=np.float64)
        self.p1 = np.asarray(self.p1, dtype=np.float64)
        self.p2 = np.asarray(self.p2, dtype=np.float64)

    @property
    def vertices(self) -> np.ndarray:
        return np.stack([self.p0, self.p1, self.p2])

    @property
    def alpha(self) -> float:
        return 1.0 / (1.0 + math.exp(-self.opacity_logit))

    @property
    def sharpness(self) -> float:
        return math.exp(self.sharpness_log)

    @property
    def smoothness(self) -> float:
        return math.exp(self.smoothness_log)

    def area(self) -> float:
        m = np.cross(self.p1 - self.p0, self.p2 - self.p0)
        return 0.5 * float(np.linalg.norm(m))


@dataclass
class LocalFrame:
    """Orthonormal tangent frame at the barycenter (t_v = n x t_u)."""

    mu: np.ndarray
    t_u: np.ndarray
    t_v: np.ndarray
    n: np.ndarray
    s_u: float
    s_v: float


@dataclass
class TangentTransform:
    """Homogeneous map H from local (u, v, 0, 1) to world space."""

    H: np.ndarray

    def apply(self, uv: np.ndarray) -> np.ndarray:
        """Map local 2D points (..., 2) to world points (..., 3)."""
        uv = np.asarray(uv, dtype=np.float64)
        return (
            uv[..., :1] * self.H[:3, 0]
            + uv[..., 1:2] * self.H[:3, 1]
            + self.H[:3, 3]
        )


@dataclass
class LocalVertexCoords:
    a_hat: float
    coords: np.ndarray  # (3, 2): (1,0), (a_hat,1), (-1-a_hat,-1)


@dataclass
class SubTriangle:
    vertices: np.ndarray  # (3, 3)
    parent_id: int


def local_frame(
    tri: TrianglePrimitive,
    eps_area: float = DEFAULT_EPS_AREA,
    eps_scale: float = DEFAULT_EPS_SCALE,
) -> LocalFrame:
    """Build the tangent frame of a triangle.

    Raises:
        DegenerateTriangle: if the area falls below ``eps_area`` or either
            tangent scale below ``eps_scale``.
    """
    mu = (tri.p0 + tri.p1 + tri.p2) / 3.0
    e = tri.p0 - mu
    s_u = float(np.linalg.norm(e))
    m = np.cross(tri.p1 - tri.p0, tri.p2 - tri.p0)
    norm_m = float(np.linalg.norm(m))
    if 0.5 * norm_m <= eps_area or s_u <= eps_scale:
        raise DegenerateTriangle(
            f"triangle {tri.id}: area {0.5 * norm_m:.3e} or s_u {s_u:.3e} below floor"
        )
    n = m / norm_m
    t_u = e / s_u
    t_v = np.cross(n, t_u)
    s_v = float(np.dot(t_v, tri.p1 - mu))
    # s_v = |m| / (3 s_u) > 0 follows from the construction; abs() guards rounding.
    s_v = abs(s_v)
    if s_v <= eps_scale:
        raise DegenerateTriangle(f"triangle {tri.id}: s_v {s_v:.3e} below floor")
    return LocalFrame(mu=mu, t_u=t_u, t_v=t_v, n=n, s_u=s_u, s_v=s_v)


def tangent_transform(frame: LocalFrame) -> TangentTransform:
    """Assemble H with columns (s_u t_u, s_v t_v, 0, mu) in homogeneous form."""
    H = np.zeros((4, 4), dtype=np.float64)
    H[:3, 0] = frame.s_u * frame.t_u
    H[:3, 1] = frame.s_v * frame.t_v
    H[:3, 3] = frame.mu
    H[3, 3] = 1.0
    return TangentTransform(H=H)


def local_vertex_coords(tri: TrianglePrimitive, frame: LocalFrame) -> LocalVertexCoords:
    a_hat = float(np.dot(frame.t_u, tri.p1 - frame.mu)) / frame.s_u
    coords = np.array(
        [[1.0, 0.0], [a_hat, 1.0], [-1.0 - a_hat, -1.0]], dtype=np.float64
    )
    return LocalVertexCoords(a_hat=a_hat, coords=coords)


def edge_functions(x_local, a_hat):
    """Signed affine edge forms at local point(s) x = (u, v).

    Each form vanishes on the line through its edge's two local vertices and
    equals -1 at the origin; negative values are inside the triangle.
    Accepts scalars or broadcastable arrays.
    """
    x_local = np.asarray(x_local, dtype=np.float64)
    u = x_local[..., 0]
    v = x_local[..., 1]
    d0 = u + (1.0 - a_hat) * v - 1.0
    d1 = -2.0 * u + (2.0 * a_hat + 1.0) * v - 1.0
    d2 = u + (-2.0 - a_hat) * v - 1.0
    return d0, d1, d2


def bisect_longest_edge(
    tri: TrianglePrimitive, eps_area: float = DEFAULT_EPS_AREA
) -> tuple[TrianglePrimitive, TrianglePrimitive]:
    """Split the longest edge at its midpoint into two coplanar children.

    Exact length ties are broken by the lowest (vertex-index pair) in
    lexicographic order: (0,1) < (0,2) < (1,2). Children copy opacity,
    sharpness and smoothness, carry ``parent_id`` and leave ``id`` unassigned.
    """
    verts = tri.vertices
    if tri.area() <= eps_area:
        raise DegenerateTriangle(f"triangle {tri.id}: cannot bisect degenerate triangle")
    best = None
    for j, (ia, ib) in enumerate(_EDGE_VERTEX_PAIRS):
        length = float(np.linalg.norm(verts[ib] - verts[ia]))
        pair = tuple(sorted((ia, ib)))
        key = (-length, pair)
        if best is None or key < best[0]:
            best = (key, j)
    j = best[1]
    child_a_verts, child_b_verts = _bisect_edge_vertices(verts, j)
    common = dict(
        opacity_logit=tri.opacity_logit,
        sharpness_log=tri.sharpness_log,
        smoothness_log=tri.smoothness_log,
        parent_id=tri.id,
    )
    child_a = TrianglePrimitive(*child_a_verts, **common)
    child_b = TrianglePrimitive(*child_b_verts, **common)
    return child_a, child_b


def _bisect_edge_vertices(verts: np.ndarray, edge_index: int):
    """Children of splitting edge ``edge_index``; winding (normal) preserved."""
    ia, ib = _EDGE_VERTEX_PAIRS[edge_index]
    ic = 3 - ia - ib
    mid = 0.5 * (verts[ia] + verts[ib])
    return (verts[ia], mid, verts[ic]), (mid, verts[ib], verts[ic])


def subdivision_levels(max_edge: float, edge_threshold: float, cap: int = 8) -> tuple[int, bool]:
    """Uniform 4-way subdivision depth so every sub-edge is < edge_threshold.

    Each level halves all edge lengths. Returns (levels, capped); ``capped``
    signals the budget was hit and the result is the partial subdivision at
    the cap.
    """
    if edge_threshold <= 0.0:
        raise ValueError("edge_threshold must be positive")
    if max_edge < edge_threshold:
        return 0, False
    levels = int(math.floor(math.log2(max_edge / edge_threshold))) + 1
    if levels > cap:
        return cap, True
    return levels, False


def _subdivide_once(verts: np.ndarray) -> np.ndarray:
    """One 4-way midpoint subdivision of a batch (N,3,3) -> (4N,3,3)."""
    p0, p1, p2 = verts[:, 0], verts[:, 1], verts[:, 2]
    m01 = 0.5 * (p0 + p1)
    m12 = 0.5 * (p1 + p2)
    m20 = 0.5 * (p2 + p0)
    children = np.empty((verts.shape[0], 4, 3, 3), dtype=np.float64)
    children[:, 0, 0], children[:, 0, 1], children[:, 0, 2] = p0, m01, m20
    children[:, 1, 0], children[:, 1, 1], children[:, 1, 2] = m01, p1, m12
    children[:, 2, 0], children[:, 2, 1], children[:, 2, 2] = m20, m12, p2
    children[:, 3, 0], children[:, 3, 1], children[:, 3, 2] = m01, m12, m20
    return children.reshape(-1, 3, 3)


def subdivide_for_sorting(
    tri: TrianglePrimitive, edge_threshold: float, cap: int = 8
) -> list[SubTriangle]:
    """Recursively midpoint-subdivide until all sub-edges are < edge_threshold.

    The recursion depth is bounded by ``cap``; hitting the bound returns the
    partial subdivision at the cap rather than aborting.
    """
    verts = tri.vertices[None]
    edges = np.linalg.norm(verts - np.roll(verts, -1, axis=1), axis=2)
    levels, _ = subdivision_levels(float(edges.max()), edge_threshold, cap)
    for _ in range(levels):
        verts = _subdivide_once(verts)
    return [SubTriangle(vertices=v, parent_id=tri.id) for v in verts]


# ---------------------------------------------------------------------------
# Batched variants
# ---------------------------------------------------------------------------


@dataclass
class FrameBatch:
    """Tangent frames for a vertex batch; rows with ``valid == False`` are
    degenerate and hold unspecified values."""

    mu: np.ndarray      # (N, 3)
    t_u: np.ndarray     # (N, 3)
    t_v: np.ndarray     # (N, 3)
    n: np.ndarray       # (N, 3)
    s_u: np.ndarray     # (N,)
    s_v: np.ndarray     # (N,)
    a_hat: np.ndarray   # (N,)
    m: np.ndarray       # (N, 3) unnormalized cross product
    norm_m: np.ndarray  # (N,)
    area: np.ndarray    # (N,)
    valid: np.ndarray   # (N,) bool

    @property
    def p_u(self) -> np.ndarray:
        """First H column, s_u * t_u (equals p0 - mu)."""
        return self.t_u * self.s_u[:, None]

    @property
    def p_v(self) -> np.ndarray:
        """Second H column, s_v * t_v."""
        return self.t_v * self.s_v[:, None]


def batch_frames(
    vertices: np.ndarray,
    eps_area: float = DEFAULT_EPS_AREA,
    eps_scale: float = DEFAULT_EPS_SCALE,
) -> FrameBatch:
    """Vectorized :func:`local_frame` over (N,3,3) vertices; degenerate rows
    are flagged instead of raising."""
    vertices = np.asarray(vertices, dtype=np.float64)
    p0, p1, p2 = vertices[:, 0], vertices[:, 1], vertices[:, 2]
    mu = vertices.mean(axis=1)
    e = p0 - mu
    s_u = np.linalg.norm(e, axis=1)
    m = np.cross(p1 - p0, p2 - p0)
    norm_m = np.linalg.norm(m, axis=1)
    area = 0.5 * norm_m
    valid = (area > eps_area) & (s_u > eps_scale)
    safe_su = np.where(valid, s_u, 1.0)
    safe_nm = np.where(valid, norm_m, 1.0)
    t_u = e / safe_su[:, None]
    n = m / safe_nm[:, None]
    t_v = np.cross(n, t_u)
    s_v = np.abs(np.einsum("ij,ij->i", t_v, p1 - mu))
    valid &= s_v > eps_scale
    safe_sv = np.where(valid, s_v, 1.0)
    a_hat = np.einsum("ij,ij->i", t_u, p1 - mu) / safe_su
    return FrameBatch(
        mu=mu, t_u=t_u, t_v=t_v, n=n, s_u=safe_su, s_v=safe_sv, a_hat=a_hat,
        m=m, norm_m=safe_nm, area=area, valid=valid,
    )


def batch_edge_lengths(vertices: np.ndarray) -> np.ndarray:
    """Edge lengths (N,3) in edge-slot order (p0p1, p1p2, p2p0)."""
    return np.linalg.norm(np.roll(vertices, -1, axis=1) - vertices, axis=2)


def subdivide_batch(
    vertices: np.ndarray, edge_threshold: float, cap: int = 8
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Subdivide a batch of triangles for depth sorting.

    Returns (sub_vertices (M,3,3), parent_index (M,), any_capped). Parent
    indices point into the input batch; triangles already under the threshold
    pass through unchanged.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    n = vertices.shape[0]
    if n == 0:
        return vertices.reshape(0, 3, 3), np.zeros(0, dtype=np.int64), False
    max_edge = batch_edge_lengths(vertices).max(axis=1)
    with np.errstate(divide="ignore"):
        ratio = max_edge / edge_threshold
    levels = np.zeros(n, dtype=np.int64)
    need = ratio >= 1.0
    levels[need] = np.floor(np.log2(ratio[need])).astype(np.int64) + 1
    any_capped = bool(np.any(levels > cap))
    np.clip(levels, 0, cap, out=levels)

    out_verts = []
    out_parent = []
    for lvl in np.unique(levels):
        sel = np.nonzero(levels == lvl)[0]
        v = vertices[sel]
        for _ in range(int(lvl)):
            v = _subdivide_once(v)
        out_verts.append(v)
        out_parent.append(np.repeat(sel, 4 ** int(lvl)))
    sub_vertices = np.concatenate(out_verts, axis=0)
    parent_index = np.concatenate(out_parent, axis=0)
    # Deterministic order: parent-major, then generation order within a parent.
    order = np.argsort(parent_index, kind="stable")
    return sub_vertices[order], parent_index[order], any_capped


def frame_backward(
    vertices: np.ndarray,
    frames: FrameBatch,
    g_mu: np.ndarray | None = None,
    g_e: np.ndarray | None = None,
    g_t_u: np.ndarray | None = None,
    g_t_v: np.ndarray | None = None,
    g_n: np.ndarray | None = None,
    g_s_u: np.ndarray | None = None,
    g_s_v: np.ndarray | None = None,
    g_a_hat: np.ndarray | None = None,
) -> np.ndarray:
    """Pull frame-quantity cotangents back to vertex gradients.

    Given dL/d(frame fields) for a batch, returns dL/d(vertices) of shape
    (N,3,3). Unsupplied cotangents are treated as zero. This is the single
    shared chain for both splat kernels; it mirrors the frame construction:

        mu  = (p0+p1+p2)/3          e = p0 - mu       c = p1 - mu
        s_u = |e|                   t_u = e / s_u
        m   = (p1-p0) x (p2-p0)     n   = m / |m|     t_v = n x t_u
        s_v = t_v . c               a_hat = (t_u . c) / s_u
    """
    n_tri = vertices.shape[0]
    zeros3 = np.zeros((n_tri, 3), dtype=np.float64)
    zeros1 = np.zeros(n_tri, dtype=np.float64)
    g_mu = zeros3 if g_mu is None else g_mu
    g_e = zeros3 if g_e is None else g_e
    g_t_u = zeros3 if g_t_u is None else g_t_u
    g_t_v = zeros3 if g_t_v is None else g_t_v
    g_n = zeros3 if g_n is None else g_n
    g_s_u = zeros1 if g_s_u is None else g_s_u
    g_s_v = zeros1 if g_s_v is None else g_s_v
    g_a_hat = zeros1 if g_a_hat is None else g_a_hat

    t_u, t_v, n = frames.t_u, frames.t_v, frames.n
    s_u = frames.s_u[:, None]
    mu = frames.mu
    p0, p1, p2 = vertices[:, 0], vertices[:, 1], vertices[:, 2]
    c = p1 - mu

    gtv = g_t_v + g_s_v[:, None] * c
    gc = g_s_v[:, None] * t_v
    gtu = g_t_u + g_a_hat[:, None] * c / s_u
    gc = gc + g_a_hat[:, None] * t_u / s_u
    gsu = g_s_u - g_a_hat * frames.a_hat / frames.s_u

    gn = g_n + np.cross(t_u, gtv)
    gtu = gtu + np.cross(gtv, n)

    # n = m / |m|
    gm = (gn - np.einsum("ij,ij->i", n, gn)[:, None] * n) / frames.norm_m[:, None]
    # t_u = e / s_u with s_u = |e|
    ge = (
        g_e
        + (gtu - np.einsum("ij,ij->i", t_u, gtu)[:, None] * t_u) / s_u
        + gsu[:, None] * t_u
    )

    gp = np.empty((n_tri, 3, 3), dtype=np.float64)
    gp[:, 0] = (2.0 * ge - gc + g_mu) / 3.0
    gp[:, 1] = (-ge + 2.0 * gc + g_mu) / 3.0
    gp[:, 2] = (-ge - gc + g_mu) / 3.0

    a = p1 - p0
    b = p2 - p0
    ga = np.cross(b, gm)
    gb = np.cross(gm, a)
    gp[:, 1] += ga
    gp[:, 2] += gb
    gp[:, 0] -= ga + gb
    return gp
