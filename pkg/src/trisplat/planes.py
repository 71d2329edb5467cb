"""Planar abstraction: oriented point sampling, greedy region-growing plane
detection, the coarse-to-fine LoD schedule, and Chamfer evaluation.

Detection is deterministic: seeds are ranked by the flatness of their local
neighborhood, regions grow over a fixed k-nearest-neighbor graph, and every
accepted primitive satisfies its pass's distance and normal-consistency
constraints against its own final fit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.exceptions import NotFittedError

from .errors import EmptyCloud
from .geometry import batch_frames
from .soup import TriangleSoup

DEFAULT_NEIGHBORS = 30

# (epsilon as fraction of the bbox diagonal, min inliers, normal threshold),
# ten passes, coarse to fine. LoD 0 covers passes 0-2, LoD 1 passes 0-5,
# LoD 2 all ten.
LOD_TABLE: tuple[tuple[float, int, float], ...] = (
    (0.015, 4000, 0.85),
    (0.002, 500, 0.85),
    (0.0005, 200, 0.85),
    (0.0005, 100, 0.8),
    (0.0005, 80, 0.8),
    (0.0005, 30, 0.8),
    (0.0005, 20, 0.75),
    (0.0005, 10, 0.75),
    (0.0005, 5, 0.7),
    (0.0005, 4, 0.5),
)
LOD_PASS_END = (3, 6, 10)  # exclusive pass index ending each LoD level


@dataclass
class OrientedPointCloud:
    points: np.ndarray   # (M, 3)
    normals: np.ndarray  # (M, 3) unit
    source: np.ndarray   # (M,) triangle id

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class PlanarPrimitive:
    normal: np.ndarray      # unit plane normal
    offset: float           # plane: normal . x = offset
    inlier_ids: np.ndarray  # indices into the detection input cloud
    level: int              # LoD level of the detection pass
    pass_index: int

    @property
    def inlier_count(self) -> int:
        return int(self.inlier_ids.size)

    def distances(self, points: np.ndarray) -> np.ndarray:
        return np.abs(points @ self.normal - self.offset)


@dataclass
class LodSchedule:
    passes: tuple[tuple[float, int, float], ...] = LOD_TABLE
    lod_pass_end: tuple[int, int, int] = LOD_PASS_END

    def level_of_pass(self, pass_index: int) -> int:
        for level, end in enumerate(self.lod_pass_end):
            if pass_index < end:
                return level
        return len(self.lod_pass_end) - 1

    def describe(self) -> list[dict]:
        return [
            {
                "pass": i,
                "epsilon_frac": eps,
                "min_inliers": mi,
                "normal_threshold": th,
                "lod": self.level_of_pass(i),
            }
            for i, (eps, mi, th) in enumerate(self.passes)
        ]


def sample_oriented_points(
    soup: TriangleSoup,
    density: float,
    rng: np.random.Generator | int | None = None,
) -> OrientedPointCloud:
    """Sample ~Poisson(area * density) points per triangle, uniform in
    barycentric coordinates, each carrying the triangle's normal."""
    if density <= 0:
        raise ValueError("density must be positive")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    frames = batch_frames(soup.vertices)
    rows = np.nonzero(frames.valid)[0]
    counts = rng.poisson(frames.area[rows] * density)
    total = int(counts.sum())
    rep = np.repeat(rows, counts)
    r1 = np.sqrt(rng.random(total))
    r2 = rng.random(total)
    w0 = 1.0 - r1
    w1 = r1 * (1.0 - r2)
    w2 = r1 * r2
    v = soup.vertices[rep]
    pts = w0[:, None] * v[:, 0] + w1[:, None] * v[:, 1] + w2[:, None] * v[:, 2]
    return OrientedPointCloud(
        points=pts, normals=frames.n[rep], source=soup.ids[rep]
    )


def _fit_plane(ssum: np.ndarray, souter: np.ndarray, count: int):
    """Plane through running sums: centroid and smallest-eigenvector normal."""
    centroid = ssum / count
    cov = souter / count - np.outer(centroid, centroid)
    eigval, eigvec = np.linalg.eigh(cov)
    normal = eigvec[:, 0]
    return centroid, normal, float(eigval[0])


def detect_planes_pass(
    points: np.ndarray,
    normals: np.ndarray,
    epsilon: float,
    min_inliers: int,
    normal_threshold: float,
    n_neighbors: int = DEFAULT_NEIGHBORS,
    pass_index: int = 0,
    level: int = 0,
    active: np.ndarray | None = None,
) -> tuple[list[PlanarPrimitive], np.ndarray]:
    """One greedy region-growing pass.

    Seeds are unassigned points ordered by the residual of their local
    neighborhood plane fit; regions grow along the kNN graph accepting points
    within ``epsilon`` of the running plane whose normals satisfy
    |n_point . n_plane| >= normal_threshold, refitting as the region doubles.
    Regions below ``min_inliers`` are rejected and returned to the pool.

    Returns (primitives, residual point indices).
    """
    points = np.asarray(points, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    m = points.shape[0]
    if active is None:
        active = np.arange(m, dtype=np.int64)
    if active.size < max(min_inliers, 3):
        return [], active

    pts = points[active]
    nrm = normals[active]
    k = min(n_neighbors, pts.shape[0] - 1)
    tree = cKDTree(pts)
    _, nbr = tree.query(pts, k=k + 1)
    nbr = nbr[:, 1:]  # drop self

    # Seed ranking: variance along the local fit normal, ascending.
    local_res = np.empty(pts.shape[0])
    local_normal = np.empty_like(pts)
    for i in range(pts.shape[0]):
        group = np.concatenate(([i], nbr[i]))
        gp = pts[group]
        ssum = gp.sum(axis=0)
        souter = gp.T @ gp
        _, n_loc, res = _fit_plane(ssum, souter, gp.shape[0])
        local_res[i] = res
        local_normal[i] = n_loc
    seed_order = np.argsort(local_res, kind="stable")

    assigned = np.zeros(pts.shape[0], dtype=bool)
    consumed_seed = np.zeros(pts.shape[0], dtype=bool)
    primitives: list[PlanarPrimitive] = []

    for seed in seed_order:
        if assigned[seed] or consumed_seed[seed]:
            continue
        consumed_seed[seed] = True
        plane_n = local_normal[seed]
        centroid = pts[seed]
        members = [seed]
        in_region = np.zeros(pts.shape[0], dtype=bool)
        in_region[seed] = True
        ssum = pts[seed].copy()
        souter = np.outer(pts[seed], pts[seed])
        queue = list(nbr[seed])
        queued = np.zeros(pts.shape[0], dtype=bool)
        queued[nbr[seed]] = True
        next_refit = 2
        while queue:
            q = queue.pop(0)
            if in_region[q] or assigned[q]:
                continue
            if abs((pts[q] - centroid) @ plane_n) >= epsilon:
                continue
            if abs(nrm[q] @ plane_n) < normal_threshold:
                continue
            in_region[q] = True
            members.append(q)
            ssum += pts[q]
            souter += np.outer(pts[q], pts[q])
            if len(members) >= next_refit:
                centroid, plane_n, _ = _fit_plane(ssum, souter, len(members))
                next_refit *= 2
            for nb in nbr[q]:
                if not queued[nb] and not in_region[nb] and not assigned[nb]:
                    queued[nb] = True
                    queue.append(nb)
        if len(members) < min_inliers:
            continue
        # Final fit plus consistency filtering against the final plane.
        member_idx = np.array(members, dtype=np.int64)
        for _ in range(10):
            gp = pts[member_idx]
            centroid, plane_n, _ = _fit_plane(gp.sum(axis=0), gp.T @ gp, gp.shape[0])
            ok = (np.abs((gp - centroid) @ plane_n) < epsilon) & (
                np.abs(nrm[member_idx] @ plane_n) >= normal_threshold
            )
            if ok.all():
                break
            member_idx = member_idx[ok]
            if member_idx.size < min_inliers:
                break
        if member_idx.size < min_inliers:
            continue
        # Orient the plane normal with the member normals' majority.
        if (nrm[member_idx] @ plane_n).sum() < 0:
            plane_n = -plane_n
        assigned[member_idx] = True
        primitives.append(
            PlanarPrimitive(
                normal=plane_n,
                offset=float(plane_n @ centroid),
                inlier_ids=active[member_idx],
                level=level,
                pass_index=pass_index,
            )
        )
    residual = active[~assigned]
    return primitives, residual


@dataclass
class LodExtraction:
    primitives: list[PlanarPrimitive]
    schedule: LodSchedule
    labels: np.ndarray  # per input point: primitive index or -1

    def lod_set(self, level: int) -> list[PlanarPrimitive]:
        end = self.schedule.lod_pass_end[level]
        return [p for p in self.primitives if p.pass_index < end]

    def counts(self) -> dict[str, int]:
        return {f"lod{i}": len(self.lod_set(i)) for i in range(3)}


def extract_lod_planes(
    cloud: OrientedPointCloud,
    schedule: LodSchedule | None = None,
    n_neighbors: int = DEFAULT_NEIGHBORS,
) -> LodExtraction:
    """Run the ten coarse-to-fine detection passes on successive residuals.

    Pass epsilons are fractions of the input cloud's bounding-box diagonal;
    LoD sets are cumulative (LoD0 within LoD1 within LoD2).
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot extract planes from an empty cloud")
    schedule = schedule or LodSchedule()
    diag = float(np.linalg.norm(cloud.points.max(axis=0) - cloud.points.min(axis=0)))
    if diag <= 0:
        diag = 1.0
    active = np.arange(len(cloud), dtype=np.int64)
    primitives: list[PlanarPrimitive] = []
    for i, (eps_frac, min_inliers, th_n) in enumerate(schedule.passes):
        prims, active = detect_planes_pass(
            cloud.points, cloud.normals,
            epsilon=eps_frac * diag,
            min_inliers=min_inliers,
            normal_threshold=th_n,
            n_neighbors=n_neighbors,
            pass_index=i,
            level=schedule.level_of_pass(i),
            active=active,
        )
        primitives.extend(prims)
        if active.size == 0:
            break
    labels = np.full(len(cloud), -1, dtype=np.int64)
    for idx, prim in enumerate(primitives):
        labels[prim.inlier_ids] = idx
    return LodExtraction(primitives=primitives, schedule=schedule, labels=labels)


def chamfer_distance(cloud_a: np.ndarray, cloud_b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    a = np.atleast_2d(np.asarray(cloud_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(cloud_b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptyCloud("chamfer distance of an empty cloud")
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


class RegionGrowingPlaneDetector(BaseEstimator, ClusterMixin):
    """scikit-learn style single-pass plane detector.

    fit(X, normals) populates ``planes_``, ``labels_`` (-1 for residual
    points) and ``residual_`` (indices of unassigned points).
    """

    def __init__(
        self,
        epsilon: float = 0.01,
        min_inliers: int = 100,
        normal_threshold: float = 0.8,
        n_neighbors: int = DEFAULT_NEIGHBORS,
    ):
        self.epsilon = epsilon
        self.min_inliers = min_inliers
        self.normal_threshold = normal_threshold
        self.n_neighbors = n_neighbors

    def fit(self, X, normals=None):
        if normals is None:
            raise ValueError("RegionGrowingPlaneDetector requires point normals")
        planes, residual = detect_planes_pass(
            np.asarray(X, dtype=np.float64),
            np.asarray(normals, dtype=np.float64),
            epsilon=self.epsilon,
            min_inliers=self.min_inliers,
            normal_threshold=self.normal_threshold,
            n_neighbors=self.n_neighbors,
        )
        self.planes_ = planes
        self.residual_ = residual
        labels = np.full(np.asarray(X).shape[0], -1, dtype=np.int64)
        for idx, p in enumerate(planes):
            labels[p.inlier_ids] = idx
        self.labels_ = labels
        return self

    def fit_predict(self, X, normals=None):
        return self.fit(X, normals).labels_

    def predict(self, X):
        if not hasattr(self, "planes_"):
            raise NotFittedError("RegionGrowingPlaneDetector is not fitted")
        X = np.asarray(X, dtype=np.float64)
        if not self.planes_:
            return np.full(X.shape[0], -1, dtype=np.int64)
        dists = np.stack([p.distances(X) for p in self.planes_], axis=1)
        best = np.argmin(dists, axis=1)
        labels = np.where(dists[np.arange(X.shape[0]), best] < self.epsilon, best, -1)
        return labels.astype(np.int64)
