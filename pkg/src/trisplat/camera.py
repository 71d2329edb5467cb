"""Pinhole camera model and projection utilities.

Conventions: camera frame is x-right, y-down, z-forward; ``R`` and ``t`` map
world to camera (c = R p + t). Continuous screen coordinates place the center
of pixel (px, py) at (px + 0.5, py + 0.5); projecting a point yields
(fx x/z + cx, fy y/z + cy).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import as_float_array, check_rotation

DEFAULT_NEAR = 0.01
DEFAULT_GUARD_BAND = 0.2


@dataclass
class PinholeCamera:
    id: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = check_rotation(self.R, f"camera {self.id} R")
        self.t = as_float_array(self.t, f"camera {self.id} t", (3,))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"camera {self.id}: focal lengths must be positive")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.t

    def world_to_screen_matrix(self) -> np.ndarray:
        """4x4 homogeneous map W: world point -> (x*w, y*w, z, w) with
        w = camera depth; screen coords are rows 0..1 divided by row 3."""
        W = np.zeros((4, 4), dtype=np.float64)
        W[0, :3] = self.fx * self.R[0] + self.cx * self.R[2]
        W[0, 3] = self.fx * self.t[0] + self.cx * self.t[2]
        W[1, :3] = self.fy * self.R[1] + self.cy * self.R[2]
        W[1, 3] = self.fy * self.t[1] + self.cy * self.t[2]
        W[2, :3] = self.R[2]
        W[2, 3] = self.t[2]
        W[3, :3] = self.R[2]
        W[3, 3] = self.t[2]
        return W

    def pixel_rays(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World-space (origin, unit direction) for pixel indices (..., 2)."""
        pixels = np.asarray(pixels, dtype=np.float64)
        d = np.stack(
            [
                (pixels[..., 0] + 0.5 - self.cx) / self.fx,
                (pixels[..., 1] + 0.5 - self.cy) / self.fy,
                np.ones(pixels.shape[:-1]),
            ],
            axis=-1,
        )
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        d_world = d @ self.R
        origin = np.broadcast_to(self.center, d_world.shape)
        return origin, d_world

    def all_pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        pixels = np.stack([xs, ys], axis=-1)
        return self.pixel_rays(pixels)


def project_points(
    camera: PinholeCamera,
    points: np.ndarray,
    near: float = DEFAULT_NEAR,
    guard_band: float = DEFAULT_GUARD_BAND,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points; returns (screen (N,2), view depth (N,), visible).

    View depth is the camera-frame z coordinate. A point is visible when its
    depth exceeds ``near`` and its screen position lies within the image
    bounds expanded by ``guard_band`` on every side.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = points @ camera.R.T + camera.t
    z = cam[:, 2]
    safe_z = np.where(np.abs(z) > 1e-30, z, 1e-30)
    screen = np.stack(
        [
            camera.fx * cam[:, 0] / safe_z + camera.cx,
            camera.fy * cam[:, 1] / safe_z + camera.cy,
        ],
        axis=1,
    )
    gx = guard_band * camera.width
    gy = guard_band * camera.height
    visible = (
        (z > near)
        & (screen[:, 0] >= -gx)
        & (screen[:, 0] <= camera.width + gx)
        & (screen[:, 1] >= -gy)
        & (screen[:, 1] <= camera.height + gy)
    )
    return screen, z, visible


def project_vertex(
    camera: PinholeCamera,
    p: np.ndarray,
    near: float = DEFAULT_NEAR,
    guard_band: float = DEFAULT_GUARD_BAND,
) -> tuple[np.ndarray, float, bool]:
    """Single-point convenience wrapper around :func:`project_points`."""
    screen, z, visible = project_points(camera, np.asarray(p)[None], near, guard_band)
    return screen[0], float(z[0]), bool(visible[0])
