"""Structure-of-arrays containers for the triangle soup and its appearance
attachments.

The soup deliberately carries no connectivity: triangles are independent
primitives identified by stable integer ids. All arrays are float64 during
optimization; (de)serialization casts to float32 (see ``sceneio``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import TrianglePrimitive

FEATURE_DIM = 32
DEFAULT_K_OFFSETS = 10


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class AppearanceModel:
    """Per-triangle appearance attachment spawning k view-renderable surfels.

    ``features`` is an inert context slot reserved for extensions; rendering
    uses the direct per-offset attributes. Offsets are dimensionless and get
    scaled by ``offset_scale`` (per-axis, scene units) at spawn time.
    """

    features: np.ndarray      # (N, 32)
    offset_scale: np.ndarray  # (N, 3)
    offsets: np.ndarray       # (N, k, 3)
    color_logit: np.ndarray   # (N, k, 3) -> color = sigmoid in [0,1]
    opacity_logit: np.ndarray  # (N, k)
    scale_log: np.ndarray     # (N, k, 2) -> tangent extents = exp
    rotation: np.ndarray      # (N, k) in-plane angle, radians

    @property
    def k(self) -> int:
        return self.offsets.shape[1]

    @property
    def n(self) -> int:
        return self.offsets.shape[0]

    def colors(self) -> np.ndarray:
        return _sigmoid(self.color_logit)

    def opacities(self) -> np.ndarray:
        return _sigmoid(self.opacity_logit)

    def scales(self) -> np.ndarray:
        return np.exp(self.scale_log)

    @staticmethod
    def initialize(vertices: np.ndarray, k: int = DEFAULT_K_OFFSETS) -> "AppearanceModel":
        """Defaults: zero offsets, offset_scale at 0.1x the local triangle
        size, surfel extents at 0.35x of it, opacity 0.1, mid-grey color."""
        n = vertices.shape[0]
        edges = np.linalg.norm(
            np.roll(vertices, -1, axis=1) - vertices, axis=2
        )
        size = edges.mean(axis=1) if n else np.zeros(0)
        scale_log = np.log(np.maximum(0.35 * size, 1e-8))
        return AppearanceModel(
            features=np.zeros((n, FEATURE_DIM), dtype=np.float64),
            offset_scale=np.repeat((0.1 * size)[:, None], 3, axis=1),
            offsets=np.zeros((n, k, 3), dtype=np.float64),
            color_logit=np.zeros((n, k, 3), dtype=np.float64),
            opacity_logit=np.full((n, k), -np.log(9.0), dtype=np.float64),
            scale_log=np.repeat(scale_log[:, None, None], k, axis=1).repeat(2, axis=2)
            if n
            else np.zeros((0, k, 2)),
            rotation=np.zeros((n, k), dtype=np.float64),
        )

    def select(self, index: np.ndarray) -> "AppearanceModel":
        return AppearanceModel(
            features=self.features[index].copy(),
            offset_scale=self.offset_scale[index].copy(),
            offsets=self.offsets[index].copy(),
            color_logit=self.color_logit[index].copy(),
            opacity_logit=self.opacity_logit[index].copy(),
            scale_log=self.scale_log[index].copy(),
            rotation=self.rotation[index].copy(),
        )

    @staticmethod
    def concatenate(parts: list["AppearanceModel"]) -> "AppearanceModel":
        return AppearanceModel(
            features=np.concatenate([p.features for p in parts]),
            offset_scale=np.concatenate([p.offset_scale for p in parts]),
            offsets=np.concatenate([p.offsets for p in parts]),
            color_logit=np.concatenate([p.color_logit for p in parts]),
            opacity_logit=np.concatenate([p.opacity_logit for p in parts]),
            scale_log=np.concatenate([p.scale_log for p in parts]),
            rotation=np.concatenate([p.rotation for p in parts]),
        )


@dataclass
class TriangleSoup:
    vertices: np.ndarray        # (N, 3, 3)
    opacity_logit: np.ndarray   # (N,)
    sharpness_log: np.ndarray   # (N,)
    smoothness_log: np.ndarray  # (N,)
    ids: np.ndarray             # (N,) int64, stable
    parent_ids: np.ndarray      # (N,) int64, -1 when unset
    appearance: AppearanceModel

    def __len__(self) -> int:
        return self.vertices.shape[0]

    @property
    def alphas(self) -> np.ndarray:
        return _sigmoid(self.opacity_logit)

    @property
    def sharpness(self) -> np.ndarray:
        return np.exp(self.sharpness_log)

    @property
    def smoothness(self) -> np.ndarray:
        return np.exp(self.smoothness_log)

    def next_id(self) -> int:
        return int(self.ids.max()) + 1 if len(self) else 0

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        flat = self.vertices.reshape(-1, 3)
        return flat.min(axis=0), flat.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def triangle(self, row: int) -> TrianglePrimitive:
        """Materialize one triangle as a scalar primitive (copying)."""
        pid = int(self.parent_ids[row])
        return TrianglePrimitive(
            p0=self.vertices[row, 0].copy(),
            p1=self.vertices[row, 1].copy(),
            p2=self.vertices[row, 2].copy(),
            opacity_logit=float(self.opacity_logit[row]),
            sharpness_log=float(self.sharpness_log[row]),
            smoothness_log=float(self.smoothness_log[row]),
            id=int(self.ids[row]),
            parent_id=None if pid < 0 else pid,
        )

    def select(self, index: np.ndarray) -> "TriangleSoup":
        """Row subset (boolean mask or integer index), deep-copied."""
        return TriangleSoup(
            vertices=self.vertices[index].copy(),
            opacity_logit=self.opacity_logit[index].copy(),
            sharpness_log=self.sharpness_log[index].copy(),
            smoothness_log=self.smoothness_log[index].copy(),
            ids=self.ids[index].copy(),
            parent_ids=self.parent_ids[index].copy(),
            appearance=self.appearance.select(index),
        )

    def copy(self) -> "TriangleSoup":
        return self.select(np.arange(len(self)))

    @staticmethod
    def empty(k: int = DEFAULT_K_OFFSETS) -> "TriangleSoup":
        return TriangleSoup(
            vertices=np.zeros((0, 3, 3)),
            opacity_logit=np.zeros(0),
            sharpness_log=np.zeros(0),
            smoothness_log=np.zeros(0),
            ids=np.zeros(0, dtype=np.int64),
            parent_ids=np.full(0, -1, dtype=np.int64),
            appearance=AppearanceModel.initialize(np.zeros((0, 3, 3)), k),
        )


@dataclass
class GradientBuffers:
    """Per-triangle gradients produced by the splat renderer backward pass."""

    vertices: np.ndarray        # (N, 3, 3)
    opacity_logit: np.ndarray   # (N,)
    sharpness_log: np.ndarray   # (N,)
    smoothness_log: np.ndarray  # (N,)

    @staticmethod
    def zeros(n: int) -> "GradientBuffers":
        return GradientBuffers(
            vertices=np.zeros((n, 3, 3)),
            opacity_logit=np.zeros(n),
            sharpness_log=np.zeros(n),
            smoothness_log=np.zeros(n),
        )

    def __iadd__(self, other: "GradientBuffers") -> "GradientBuffers":
        self.vertices += other.vertices
        self.opacity_logit += other.opacity_logit
        self.sharpness_log += other.sharpness_log
        self.smoothness_log += other.smoothness_log
        return self
