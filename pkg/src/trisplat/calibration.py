"""RANSAC scale/shift calibration of relative depth against sparse metric
depths.

Fits z = s * m + t from 2-point minimal samples; inliers are residuals below
2% of the median metric depth; the final model is a least-squares refit on
the best consensus set. Exposed both as a plain function returning a
:class:`CalibrationModel` and as a scikit-learn style estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from .errors import DegenerateFit, InsufficientPoints

INLIER_REL_THRESHOLD = 0.02
MAX_ITERS = 1000
CONFIDENCE = 0.999
_BLOCK = 128


@dataclass
class CalibrationModel:
    """Maps relative depth to metric depth: D = scale * D_rel + shift."""

    scale: float
    shift: float
    inlier_count: int

    def apply(self, depth: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(depth, dtype=np.float64) + self.shift


def calibrate_depth_ransac(
    m: np.ndarray,
    z: np.ndarray,
    max_iters: int = MAX_ITERS,
    confidence: float = CONFIDENCE,
    inlier_rel_threshold: float = INLIER_REL_THRESHOLD,
    seed: int = 0,
) -> CalibrationModel:
    """Robustly fit z = s*m + t over point pairs.

    Runs up to ``max_iters`` 2-point hypotheses, stopping early once the
    ``confidence`` level is reached for the best inlier ratio, then refits
    (s, t) by least squares on the best consensus set.

    Raises:
        InsufficientPoints: fewer than 2 pairs.
        DegenerateFit: all relative depths equal.
    """
    m = np.asarray(m, dtype=np.float64).ravel()
    z = np.asarray(z, dtype=np.float64).ravel()
    n = m.size
    if n < 2:
        raise InsufficientPoints(f"need at least 2 point pairs, got {n}")
    if float(np.ptp(m)) == 0.0:
        raise DegenerateFit("all relative depths are identical")
    threshold = inlier_rel_threshold * float(np.median(z))
    if threshold <= 0.0:
        threshold = inlier_rel_threshold

    rng = np.random.default_rng(seed)
    best_count = -1
    best_inliers = None
    done = 0
    needed = max_iters
    log_outlier = np.log(max(1.0 - confidence, 1e-12))
    while done < min(needed, max_iters):
        block = min(_BLOCK, max_iters - done)
        i = rng.integers(0, n, size=block)
        j = rng.integers(0, n, size=block)
        done += block
        dm = m[i] - m[j]
        ok = np.abs(dm) > 1e-12
        if not np.any(ok):
            continue
        s = np.where(ok, (z[i] - z[j]) / np.where(ok, dm, 1.0), 0.0)
        t = z[i] - s * m[i]
        resid = np.abs(z[None, :] - (s[:, None] * m[None, :] + t[:, None]))
        counts = np.where(ok, (resid < threshold).sum(axis=1), -1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count = int(counts[k])
            best_inliers = resid[k] < threshold
            ratio = best_count / n
            if ratio >= 1.0:
                break
            denom = np.log(max(1.0 - ratio**2, 1e-12))
            needed = int(np.ceil(log_outlier / denom)) if denom < 0 else max_iters
    if best_inliers is None or best_count < 2:
        raise DegenerateFit("RANSAC found no 2-point consensus")

    mm, zz = m[best_inliers], z[best_inliers]
    if float(np.ptp(mm)) == 0.0:
        raise DegenerateFit("consensus set has constant relative depth")
    A = np.stack([mm, np.ones_like(mm)], axis=1)
    (scale, shift), *_ = np.linalg.lstsq(A, zz, rcond=None)
    final_inliers = int((np.abs(z - (scale * m + shift)) < threshold).sum())
    return CalibrationModel(scale=float(scale), shift=float(shift), inlier_count=final_inliers)


class RansacDepthCalibrator(BaseEstimator, RegressorMixin):
    """scikit-learn style wrapper: fit(m, z) then predict(m) = scale_*m + shift_."""

    def __init__(
        self,
        max_iters: int = MAX_ITERS,
        confidence: float = CONFIDENCE,
        inlier_rel_threshold: float = INLIER_REL_THRESHOLD,
        random_state: int = 0,
    ):
        self.max_iters = max_iters
        self.confidence = confidence
        self.inlier_rel_threshold = inlier_rel_threshold
        self.random_state = random_state

    def fit(self, X, y):
        model = calibrate_depth_ransac(
            np.asarray(X).ravel(),
            np.asarray(y).ravel(),
            max_iters=self.max_iters,
            confidence=self.confidence,
            inlier_rel_threshold=self.inlier_rel_threshold,
            seed=self.random_state,
        )
        self.scale_ = model.scale
        self.shift_ = model.shift
        self.inlier_count_ = model.inlier_count
        return self

    def predict(self, X):
        if not hasattr(self, "scale_"):
            raise NotFittedError("RansacDepthCalibrator is not fitted")
        return self.scale_ * np.asarray(X, dtype=np.float64).ravel() + self.shift_
