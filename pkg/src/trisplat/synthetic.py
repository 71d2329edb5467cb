"""Synthetic scenes with analytic ray-traced ground truth.

Three desk-scale scene kinds:
  - ``cube-room``: the interior of an axis-aligned box, cameras inside.
  - ``textured-plane``: a textured square patch viewed from above.
  - ``two-box``: two separated boxes orbited from outside.

Each bundle carries exact depth (ray-depth convention) and world-frame
normal rasters, procedural RGB, surface-sampled sparse points with
visibility tracks, and a dense ground-truth cloud for evaluation. A
scale/shift can be injected into the stored depth maps to exercise
calibration: D_stored = (D_true - shift) / scale.
"""

from __future__ import annotations

import numpy as np

from .camera import PinholeCamera
from .errors import UnknownKind
from .sceneio import SceneBundle

KINDS = ("cube-room", "textured-plane", "two-box")

_FACE_PALETTE = np.array(
    [
        [0.85, 0.35, 0.30],
        [0.30, 0.65, 0.85],
        [0.40, 0.80, 0.40],
        [0.85, 0.75, 0.30],
        [0.70, 0.45, 0.80],
        [0.90, 0.55, 0.25],
    ]
)


def look_at(eye, target, up_hint=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``eye`` looking at ``target``
    (x-right, y-down, z-forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    up = np.asarray(up_hint, dtype=np.float64)
    if abs(f @ up) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(f, up)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f])
    return R, -R @ eye


def _checker(a, b, cells):
    ia = np.floor((a * 0.5 + 0.5) * cells).astype(np.int64)
    ib = np.floor((b * 0.5 + 0.5) * cells).astype(np.int64)
    return ((ia + ib) % 2).astype(np.float64)


class _CubeRoom:
    """Interior of the box [-1, 1]^3; normals point inward."""

    extent = 1.0

    def __init__(self, rng: np.random.Generator):
        self.phase = rng.uniform(0, 2 * np.pi, 6)

    def trace(self, origins, dirs):
        o = np.asarray(origins, dtype=np.float64)
        d = np.asarray(dirs, dtype=np.float64)
        best_t = np.full(o.shape[0], np.inf)
        face = np.full(o.shape[0], -1, dtype=np.int64)
        for axis in range(3):
            for si, s in enumerate((1.0, -1.0)):
                da = d[:, axis]
                with np.errstate(divide="ignore", invalid="ignore"):
                    t = (s * self.extent - o[:, axis]) / da
                ok = (da * s > 1e-12) & (t > 1e-9) & (t < best_t)
                best_t = np.where(ok, t, best_t)
                face = np.where(ok, axis * 2 + si, face)
        hit = face >= 0
        t = np.where(hit, best_t, 0.0)
        pts = o + t[:, None] * d
        normals = np.zeros_like(pts)
        for axis in range(3):
            for si, s in enumerate((1.0, -1.0)):
                m = face == axis * 2 + si
                normals[m, axis] = -s
        return t, pts, normals, face, hit

    def albedo(self, pts, face):
        axes = [((1, 2)), ((1, 2)), ((0, 2)), ((0, 2)), ((0, 1)), ((0, 1))]
        color = np.zeros((pts.shape[0], 3))
        for f in range(6):
            m = face == f
            if not np.any(m):
                continue
            a_ax, b_ax = axes[f]
            a, b = pts[m, a_ax], pts[m, b_ax]
            ch = _checker(a, b, 6)
            wave = 0.5 + 0.5 * np.sin(3.0 * a + 5.0 * b + self.phase[f])
            base = _FACE_PALETTE[f]
            color[m] = base * (0.55 + 0.3 * ch[:, None]) + 0.12 * wave[:, None]
        return np.clip(color, 0.02, 0.98)

    def sample_surface(self, n, rng):
        face = rng.integers(0, 6, n)
        uv = rng.uniform(-1, 1, (n, 2))
        pts = np.zeros((n, 3))
        normals = np.zeros((n, 3))
        for f in range(6):
            m = face == f
            axis, si = f // 2, f % 2
            s = 1.0 if si == 0 else -1.0
            rest = [a for a in range(3) if a != axis]
            pts[m, axis] = s * self.extent
            pts[m, rest[0]] = uv[m, 0]
            pts[m, rest[1]] = uv[m, 1]
            normals[m, axis] = -s
        return pts, normals, face

    def cameras(self, n_views, width, height):
        cams = []
        ring = n_views - 2 if n_views > 4 else n_views
        for i in range(ring):
            yaw = 2 * np.pi * i / ring
            pitch = (0.45, -0.45)[i % 2]
            eye = 0.40 * np.array([np.cos(yaw), np.sin(yaw), 0.0])
            direction = np.array(
                [np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)]
            )
            cams.append((eye, eye + direction))
        if n_views > 4:
            cams.append((np.array([0.05, 0.0, -0.2]), np.array([0.06, 0.0, 1.0])))
            cams.append((np.array([-0.05, 0.0, 0.2]), np.array([-0.06, 0.0, -1.0])))
        return _build_cameras(cams, width, height, focal_factor=0.62)


class _TexturedPlane:
    """Square patch z = 0, |x|,|y| <= 1, normal +z, viewed from above."""

    def __init__(self, rng: np.random.Generator):
        self.grid = rng.uniform(0.1, 0.9, (7, 7, 3))

    def trace(self, origins, dirs):
        o = np.asarray(origins, dtype=np.float64)
        d = np.asarray(dirs, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -o[:, 2] / d[:, 2]
        pts = o + t[:, None] * d
        hit = (np.abs(d[:, 2]) > 1e-12) & (t > 1e-9) & (np.abs(pts[:, 0]) <= 1) & (np.abs(pts[:, 1]) <= 1)
        t = np.where(hit, t, 0.0)
        pts = o + t[:, None] * d
        normals = np.zeros_like(pts)
        normals[hit, 2] = 1.0
        return t, pts, normals, np.zeros(o.shape[0], dtype=np.int64), hit

    def albedo(self, pts, face):
        # Bilinear sample of a low-res random grid plus a mild checker.
        g = self.grid
        n = g.shape[0]
        fx = (pts[:, 0] * 0.5 + 0.5) * (n - 1)
        fy = (pts[:, 1] * 0.5 + 0.5) * (n - 1)
        x0 = np.clip(np.floor(fx).astype(np.int64), 0, n - 2)
        y0 = np.clip(np.floor(fy).astype(np.int64), 0, n - 2)
        ax = (fx - x0)[:, None]
        ay = (fy - y0)[:, None]
        c = (
            g[y0, x0] * (1 - ax) * (1 - ay)
            + g[y0, x0 + 1] * ax * (1 - ay)
            + g[y0 + 1, x0] * (1 - ax) * ay
            + g[y0 + 1, x0 + 1] * ax * ay
        )
        ch = _checker(pts[:, 0], pts[:, 1], 8)[:, None]
        return np.clip(c * (0.7 + 0.28 * ch), 0.02, 0.98)

    def sample_surface(self, n, rng):
        pts = np.zeros((n, 3))
        pts[:, :2] = rng.uniform(-1, 1, (n, 2))
        normals = np.zeros((n, 3))
        normals[:, 2] = 1.0
        return pts, normals, np.zeros(n, dtype=np.int64)

    def cameras(self, n_views, width, height):
        cams = []
        for i in range(n_views):
            yaw = 2 * np.pi * i / n_views
            r = 1.05 if i % 2 == 0 else 0.55
            eye = np.array([r * np.cos(yaw), r * np.sin(yaw), 1.35 + 0.15 * (i % 3)])
            target = np.array([0.35 * np.cos(yaw + 2.2), 0.35 * np.sin(yaw + 2.2), 0.0])
            cams.append((eye, target))
        return _build_cameras(cams, width, height, focal_factor=0.8)


class _TwoBox:
    """Two separated axis-aligned boxes; normals point outward."""

    boxes = (
        (np.array([-0.5, 0.0, 0.0]), np.array([0.32, 0.28, 0.40])),
        (np.array([0.5, 0.08, -0.05]), np.array([0.28, 0.34, 0.30])),
    )

    def __init__(self, rng: np.random.Generator):
        self.phase = rng.uniform(0, 2 * np.pi, 12)

    def trace(self, origins, dirs):
        o = np.asarray(origins, dtype=np.float64)
        d = np.asarray(dirs, dtype=np.float64)
        best_t = np.full(o.shape[0], np.inf)
        face = np.full(o.shape[0], -1, dtype=np.int64)
        for bi, (c, h) in enumerate(self.boxes):
            lo, hi = c - h, c + h
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo - o) / d
                t2 = (hi - o) / d
            tmin = np.minimum(t1, t2)
            tmax = np.maximum(t1, t2)
            t_enter = tmin.max(axis=1)
            t_exit = tmax.min(axis=1)
            ok = (t_enter > 1e-9) & (t_enter <= t_exit) & (t_enter < best_t)
            if not np.any(ok):
                continue
            axis_enter = np.argmax(tmin, axis=1)
            pts_enter = o + t_enter[:, None] * d
            sgn = np.sign(pts_enter[np.arange(o.shape[0]), axis_enter] - c[axis_enter])
            fidx = bi * 6 + axis_enter * 2 + (sgn < 0).astype(np.int64)
            best_t = np.where(ok, t_enter, best_t)
            face = np.where(ok, fidx, face)
        hit = face >= 0
        t = np.where(hit, best_t, 0.0)
        pts = o + t[:, None] * d
        normals = np.zeros_like(pts)
        for bi, (c, h) in enumerate(self.boxes):
            for axis in range(3):
                for si, s in enumerate((1.0, -1.0)):
                    m = face == bi * 6 + axis * 2 + si
                    normals[m, axis] = s
        return t, pts, normals, face, hit

    def albedo(self, pts, face):
        color = np.zeros((pts.shape[0], 3))
        for f in range(12):
            m = face == f
            if not np.any(m):
                continue
            axis = (f % 6) // 2
            rest = [a for a in range(3) if a != axis]
            a, b = pts[m, rest[0]], pts[m, rest[1]]
            ch = _checker(a, b, 5)
            base = _FACE_PALETTE[f % 6] if f < 6 else 1.0 - _FACE_PALETTE[f % 6]
            wave = 0.5 + 0.5 * np.sin(4.0 * a + 3.0 * b + self.phase[f])
            color[m] = base * (0.6 + 0.25 * ch[:, None]) + 0.1 * wave[:, None]
        return np.clip(color, 0.02, 0.98)

    def sample_surface(self, n, rng):
        areas = []
        for c, h in self.boxes:
            areas += [4 * h[1] * h[2]] * 2 + [4 * h[0] * h[2]] * 2 + [4 * h[0] * h[1]] * 2
        areas = np.array(areas)
        face = rng.choice(12, size=n, p=areas / areas.sum())
        pts = np.zeros((n, 3))
        normals = np.zeros((n, 3))
        uv = rng.uniform(-1, 1, (n, 2))
        for f in range(12):
            m = face == f
            bi, axis, si = f // 6, (f % 6) // 2, f % 2
            c, h = self.boxes[bi]
            s = 1.0 if si == 0 else -1.0
            rest = [a for a in range(3) if a != axis]
            pts[m, axis] = c[axis] + s * h[axis]
            pts[m, rest[0]] = c[rest[0]] + uv[m, 0] * h[rest[0]]
            pts[m, rest[1]] = c[rest[1]] + uv[m, 1] * h[rest[1]]
            normals[m, axis] = s
        return pts, normals, face

    def cameras(self, n_views, width, height):
        cams = []
        for i in range(n_views):
            yaw = 2 * np.pi * i / n_views
            eye = np.array([2.1 * np.cos(yaw), 2.1 * np.sin(yaw), 0.5 + 0.4 * ((i % 3) - 1)])
            cams.append((eye, np.array([0.0, 0.0, 0.0])))
        return _build_cameras(cams, width, height, focal_factor=1.0)


def _build_cameras(eyes_targets, width, height, focal_factor=1.0) -> list[PinholeCamera]:
    cams = []
    for i, (eye, target) in enumerate(eyes_targets):
        R, t = look_at(eye, target)
        cams.append(
            PinholeCamera(
                id=i, width=width, height=height,
                fx=focal_factor * width, fy=focal_factor * width,
                cx=width / 2.0, cy=height / 2.0, R=R, t=t,
            )
        )
    return cams


_DEFAULTS = {
    "cube-room": dict(n_views=14, n_points=200, gt_samples=20000),
    "textured-plane": dict(n_views=10, n_points=150, gt_samples=8000),
    "two-box": dict(n_views=12, n_points=300, gt_samples=12000),
}


def gen_synthetic(
    kind: str,
    seed: int = 0,
    width: int = 64,
    height: int = 64,
    n_views: int | None = None,
    n_points: int | None = None,
    depth_scale: float = 1.0,
    depth_shift: float = 0.0,
    sfm_noise: float = 0.0,
    sfm_outlier_frac: float = 0.0,
    test_modulus: int = 8,
) -> tuple[SceneBundle, dict]:
    """Generate a synthetic bundle with exact priors.

    Stored depth is (D_true - depth_shift) / depth_scale so downstream
    calibration must recover (depth_scale, depth_shift). Returns
    (bundle, meta) where meta records the generation parameters.
    """
    if kind not in KINDS:
        raise UnknownKind(f"unknown synthetic kind {kind!r}; choose from {KINDS}")
    if depth_scale == 0.0:
        raise ValueError("depth_scale must be nonzero")
    rng = np.random.default_rng(seed)
    scene = {
        "cube-room": _CubeRoom,
        "textured-plane": _TexturedPlane,
        "two-box": _TwoBox,
    }[kind](rng)
    defaults = _DEFAULTS[kind]
    n_views = defaults["n_views"] if n_views is None else n_views
    n_points = defaults["n_points"] if n_points is None else n_points

    cameras = scene.cameras(n_views, width, height)
    images, depths, normals = {}, {}, {}
    for cam in cameras:
        origins, dirs = cam.all_pixel_rays()
        o = origins.reshape(-1, 3)
        d = dirs.reshape(-1, 3)
        t, pts, nrm, face, hit = scene.trace(o, d)
        color = np.zeros((o.shape[0], 3))
        color[hit] = scene.albedo(pts[hit], face[hit])
        images[cam.id] = color.reshape(height, width, 3)
        stored = np.where(hit, (t - depth_shift) / depth_scale, 0.0)
        depths[cam.id] = stored.reshape(height, width)
        normals[cam.id] = np.where(hit[:, None], nrm, 0.0).reshape(height, width, 3)

    # Sparse points with visibility tracks (clean positions decide tracks).
    pts, _, _ = scene.sample_surface(n_points, rng)
    tracks = []
    for i in range(n_points):
        seen = []
        for cam in cameras:
            c = cam.center
            vec = pts[i] - c
            dist = float(np.linalg.norm(vec))
            if dist < 1e-9:
                continue
            camp = cam.R @ pts[i] + cam.t
            if camp[2] <= 0.01:
                continue
            sx = cam.fx * camp[0] / camp[2] + cam.cx
            sy = cam.fy * camp[1] / camp[2] + cam.cy
            if not (0 <= sx < cam.width and 0 <= sy < cam.height):
                continue
            t_hit, _, _, _, hit = scene.trace(c[None], (vec / dist)[None])
            if hit[0] and abs(t_hit[0] - dist) < 1e-4 * (1.0 + dist):
                seen.append(cam.id)
        tracks.append(np.array(seen, dtype=np.int64))
    if sfm_noise > 0:
        pts = pts + rng.normal(0.0, sfm_noise, pts.shape)
    n_out = int(round(sfm_outlier_frac * n_points))
    if n_out:
        sel = rng.choice(n_points, size=n_out, replace=False)
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        pts[sel] = rng.uniform(lo, hi, (n_out, 3))
        for s in sel:
            seen = []
            for cam in cameras:
                camp = cam.R @ pts[s] + cam.t
                if camp[2] <= 0.01:
                    continue
                sx = cam.fx * camp[0] / camp[2] + cam.cx
                sy = cam.fy * camp[1] / camp[2] + cam.cy
                if 0 <= sx < cam.width and 0 <= sy < cam.height:
                    seen.append(cam.id)
            tracks[s] = np.array(seen, dtype=np.int64)

    gt_pts, _, _ = scene.sample_surface(defaults["gt_samples"], rng)
    test_ids = [c.id for c in cameras if test_modulus > 0 and c.id % test_modulus == test_modulus - 1]

    bundle = SceneBundle(
        cameras=cameras, images=images, depths=depths, normals=normals,
        points=pts, tracks=tracks, gt_points=gt_pts, test_ids=test_ids,
    )
    meta = {
        "kind": kind, "seed": seed, "width": width, "height": height,
        "n_views": n_views, "n_points": n_points,
        "depth_scale": depth_scale, "depth_shift": depth_shift,
        "sfm_noise": sfm_noise, "sfm_outlier_frac": sfm_outlier_frac,
    }
    return bundle, meta
