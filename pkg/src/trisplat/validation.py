"""Input validation helpers.

Small, reusable checks used at public API boundaries. All helpers return
validated float64 arrays (copying only when the input needs conversion) so
downstream numerics run in double precision.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, MalformedHeader


def as_float_array(x, name: str, shape: tuple | None = None) -> np.ndarray:
    """Convert to a float64 ndarray, optionally enforcing a shape.

    A ``-1`` entry in ``shape`` matches any extent.
    """
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None:
        if arr.ndim != len(shape) or any(
            s != -1 and s != d for s, d in zip(shape, arr.shape)
        ):
            raise DimensionMismatch(
                f"{name}: expected shape {shape}, got {arr.shape}"
            )
    return arr


def check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_rotation(R, name: str = "R", tol: float = 1e-6) -> np.ndarray:
    """Validate a 3x3 rotation matrix (orthonormal, det +1)."""
    R = as_float_array(R, name, (3, 3))
    if not np.allclose(R.T @ R, np.eye(3), atol=tol):
        raise MalformedHeader(f"{name} is not orthonormal")
    if np.linalg.det(R) < 0.0:
        raise MalformedHeader(f"{name} has negative determinant (reflection)")
    return R


def check_same_shape(name_a: str, a: np.ndarray, name_b: str, b: np.ndarray) -> None:
    if a.shape[:2] != b.shape[:2]:
        raise DimensionMismatch(
            f"{name_a} {a.shape} and {name_b} {b.shape} disagree"
        )


def check_unit_rows(v: np.ndarray, name: str, mask=None, tol: float = 1e-4) -> None:
    norms = np.linalg.norm(v, axis=-1)
    if mask is not None:
        norms = norms[mask]
    if norms.size and np.max(np.abs(norms - 1.0)) > tol:
        raise ValueError(f"{name} rows are not unit length (max dev {np.max(np.abs(norms - 1.0)):.2e})")
