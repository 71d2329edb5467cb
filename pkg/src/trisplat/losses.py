"""Scalar objectives and supervision preparation.

All losses return their value together with exact (sub)gradients with respect
to the rendered inputs; the L1 subgradient at zero is zero. Per-pixel means
run over valid-mask pixels only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMask, ImageTooSmall

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

# Rec. 601 luma weights.
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class LossWeights:
    lambda_d: float = 10.0
    lambda_rgb: float = 10.0
    lambda_c: float = 0.2
    lambda_s: float = 0.01

    def __post_init__(self):
        for name in ("lambda_d", "lambda_rgb", "lambda_c", "lambda_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def geometric_loss(
    depth: np.ndarray,
    normal: np.ndarray,
    depth_ref: np.ndarray,
    normal_ref: np.ndarray,
    mask: np.ndarray,
    lambda_d: float = 10.0,
    weight: np.ndarray | None = None,
):
    """Mean over valid pixels of
    lambda_d |D - D_ref| + |N - N_ref|_1 + |1 - N . N_ref|.

    ``weight`` optionally scales each pixel's loss (used by the detail loss
    to split supervision between high- and low-frequency regions).

    Returns (value, grad_depth, grad_normal).
    """
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise EmptyMask("no valid pixels in supervision mask")
    w = np.ones(depth.shape, dtype=np.float64) if weight is None else np.asarray(weight, dtype=np.float64)
    wm = np.where(mask, w, 0.0)

    d_err = depth - depth_ref
    n_err = normal - normal_ref
    dot = np.einsum("...i,...i->...", normal, normal_ref)
    ang = 1.0 - dot

    per_pixel = lambda_d * np.abs(d_err) + np.abs(n_err).sum(axis=-1) + np.abs(ang)
    value = float((wm * per_pixel).sum() / count)

    grad_depth = wm * lambda_d * np.sign(d_err) / count
    grad_normal = (
        wm[..., None] * (np.sign(n_err) - np.sign(ang)[..., None] * normal_ref) / count
    )
    return value, grad_depth, grad_normal


def l1_loss(a: np.ndarray, b: np.ndarray):
    """Mean absolute error over all elements; returns (value, grad_a)."""
    diff = a - b
    value = float(np.abs(diff).mean())
    return value, np.sign(diff) / diff.size


def _gauss_kernel1d(window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _corr_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a 1D kernel along both axes."""
    win = k.size
    # rows
    out = np.zeros((img.shape[0], img.shape[1] - win + 1))
    for i, kv in enumerate(k):
        out += kv * img[:, i : i + out.shape[1]]
    # cols
    out2 = np.zeros((img.shape[0] - win + 1, out.shape[1]))
    for i, kv in enumerate(k):
        out2 += kv * out[i : i + out2.shape[0], :]
    return out2


def _corr_adjoint(ct: np.ndarray, k: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`_corr_valid` (kernel is symmetric)."""
    win = k.size
    pad = win - 1
    padded = np.zeros((ct.shape[0] + 2 * pad, ct.shape[1] + 2 * pad))
    padded[pad : pad + ct.shape[0], pad : pad + ct.shape[1]] = ct
    out = _corr_valid(padded, k)
    assert out.shape == shape
    return out


def ssim(img_a: np.ndarray, img_b: np.ndarray):
    """Windowed structural similarity with gradients.

    11x11 Gaussian window (sigma 1.5), stabilizers (0.01 L)^2 and (0.03 L)^2
    with L = 1, window means taken over fully valid positions only.
    Per-channel values are averaged. Returns (value, grad_a, grad_b).

    Raises:
        ImageTooSmall: if either image side is smaller than the window.
    """
    img_a = np.asarray(img_a, dtype=np.float64)
    img_b = np.asarray(img_b, dtype=np.float64)
    if img_a.shape != img_b.shape:
        raise ValueError("SSIM inputs must share a shape")
    if img_a.shape[0] < SSIM_WINDOW or img_a.shape[1] < SSIM_WINDOW:
        raise ImageTooSmall(
            f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {img_a.shape[:2]}"
        )
    if img_a.ndim == 2:
        img_a = img_a[..., None]
        img_b = img_b[..., None]
    k = _gauss_kernel1d()
    channels = img_a.shape[2]
    grad_a = np.zeros_like(img_a)
    grad_b = np.zeros_like(img_b)
    total = 0.0
    for c in range(channels):
        a = img_a[..., c]
        b = img_b[..., c]
        mu_a = _corr_valid(a, k)
        mu_b = _corr_valid(b, k)
        s_aa = _corr_valid(a * a, k) - mu_a**2
        s_bb = _corr_valid(b * b, k) - mu_b**2
        s_ab = _corr_valid(a * b, k) - mu_a * mu_b
        t1 = 2.0 * mu_a * mu_b + SSIM_C1
        t2 = 2.0 * s_ab + SSIM_C2
        b1 = mu_a**2 + mu_b**2 + SSIM_C1
        b2 = s_aa + s_bb + SSIM_C2
        smap = (t1 * t2) / (b1 * b2)
        total += float(smap.mean())

        g_map = np.full(smap.shape, 1.0 / (smap.size * channels))
        g_mu_a = g_map * (2.0 * mu_b * t2 / (b1 * b2) - smap * 2.0 * mu_a / b1)
        g_mu_b = g_map * (2.0 * mu_a * t2 / (b1 * b2) - smap * 2.0 * mu_b / b1)
        g_saa = g_map * (-smap / b2)
        g_sbb = g_map * (-smap / b2)
        g_sab = g_map * (2.0 * t1 / (b1 * b2))
        # s_aa = corr(a^2) - mu_a^2, s_ab = corr(ab) - mu_a mu_b
        g_mu_a = g_mu_a - 2.0 * mu_a * g_saa - mu_b * g_sab
        g_mu_b = g_mu_b - 2.0 * mu_b * g_sbb - mu_a * g_sab
        shape = a.shape
        grad_a[..., c] = (
            _corr_adjoint(g_mu_a, k, shape)
            + 2.0 * a * _corr_adjoint(g_saa, k, shape)
            + b * _corr_adjoint(g_sab, k, shape)
        )
        grad_b[..., c] = (
            _corr_adjoint(g_mu_b, k, shape)
            + 2.0 * b * _corr_adjoint(g_sbb, k, shape)
            + a * _corr_adjoint(g_sab, k, shape)
        )
    value = total / channels
    if channels == 1 and grad_a.shape[-1] == 1:
        grad_a = grad_a[..., 0]
        grad_b = grad_b[..., 0]
    return value, grad_a, grad_b


def wavelet_weight_map(image: np.ndarray, percentile: float = 99.0) -> np.ndarray:
    """High-frequency weight map from a single-level Haar transform.

    Luminance (Rec. 601) is decomposed into one Haar level; the per-block
    magnitude of the (LH, HL, HH) detail coefficients is upsampled to full
    resolution, normalized by its ``percentile`` value and clamped to [0, 1].
    Approaches 1 on edges and texture, 0 on flat regions.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        lum = image @ _LUMA
    else:
        lum = image
    h, w = lum.shape
    if h < 2 or w < 2:
        raise ImageTooSmall("wavelet map needs at least a 2x2 image")
    he, we = h + (h % 2), w + (w % 2)
    padded = np.empty((he, we))
    padded[:h, :w] = lum
    if h % 2:
        padded[h:, :w] = lum[-1:]
    if w % 2:
        padded[:he, w:] = padded[:he, w - 1 : w]
    a = padded[0::2, 0::2]
    b = padded[0::2, 1::2]
    c = padded[1::2, 0::2]
    d = padded[1::2, 1::2]
    lh = (a - b + c - d) / 2.0
    hl = (a + b - c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    detail = np.sqrt(lh**2 + hl**2 + hh**2)
    up = np.repeat(np.repeat(detail, 2, axis=0), 2, axis=1)[:h, :w]
    q = float(np.percentile(up, percentile))
    if q <= 0.0:
        return np.zeros((h, w))
    return np.clip(up / q, 0.0, 1.0)


def opacity_entropy_loss(alphas: np.ndarray):
    """Mean binary entropy of opacities; drives alphas toward 0 or 1.

    Gradient w.r.t. alpha is log((1-a)/a)/n. Returns (value, grad_alpha).
    """
    a = np.asarray(alphas, dtype=np.float64)
    if a.size == 0:
        return 0.0, np.zeros(0)
    value = float(np.mean(-a * np.log(a) - (1.0 - a) * np.log(1.0 - a)))
    grad = (np.log1p(-a) - np.log(a)) / a.size
    return value, grad


def scaling_volume_loss(scales: np.ndarray):
    """Mean product of tangent-plane extents (surfel area proxy).

    ``scales`` is (G, 2); returns (value, grad) with grad[:, 0] = s_v / G.
    """
    s = np.asarray(scales, dtype=np.float64)
    if s.size == 0:
        return 0.0, np.zeros_like(s)
    prod = s[:, 0] * s[:, 1]
    value = float(prod.mean())
    grad = np.stack([s[:, 1], s[:, 0]], axis=1) / s.shape[0]
    return value, grad


@dataclass
class DetailLossGrads:
    depth: np.ndarray       # on the triangle depth map
    normal: np.ndarray      # on the triangle normal map
    color_gs: np.ndarray    # on the composited appearance image
    scales: np.ndarray      # on the spawned surfel tangent extents
    value_rgb: float
    value_ssim: float
    value_geo_hf: float
    value_geo_prior: float
    value_scaling: float


def detail_loss(
    depth: np.ndarray,
    normal: np.ndarray,
    depth_gs: np.ndarray,
    normal_gs: np.ndarray,
    depth_ref: np.ndarray,
    normal_ref: np.ndarray,
    color_gt: np.ndarray,
    color_gs: np.ndarray,
    w_hf: np.ndarray,
    weights: LossWeights,
    gauss_scales: np.ndarray,
    mask_ref: np.ndarray,
) -> tuple[float, DetailLossGrads]:
    """Fine-stage objective combining appearance-driven and prior-driven
    geometric supervision with a photometric term.

    High-frequency pixels (weight map w_hf) push the triangle maps toward the
    surfel-rendered depth/normal; the complement pushes them toward the
    priors. The photometric part is
    lambda_rgb * ((1-lambda_c) L1 + lambda_c (1 - SSIM) + lambda_s L_scaling).
    Surfel maps act as detached targets; gradients flow to the triangle maps,
    the appearance image and the surfel scales.
    """
    full_mask = np.ones(depth.shape, dtype=bool)
    v1, g1_d, g1_n = geometric_loss(
        depth, normal, depth_gs, normal_gs, full_mask, weights.lambda_d, weight=w_hf
    )
    v2, g2_d, g2_n = geometric_loss(
        depth, normal, depth_ref, normal_ref, mask_ref, weights.lambda_d,
        weight=1.0 - w_hf,
    )
    v_l1, g_l1 = l1_loss(color_gs, color_gt)
    v_ssim, g_ssim, _ = ssim(color_gs, color_gt)
    v_scale, g_scale = scaling_volume_loss(gauss_scales)

    lam = weights.lambda_rgb
    value = (
        v1
        + v2
        + lam * ((1.0 - weights.lambda_c) * v_l1 + weights.lambda_c * (1.0 - v_ssim)
                 + weights.lambda_s * v_scale)
    )
    grads = DetailLossGrads(
        depth=g1_d + g2_d,
        normal=g1_n + g2_n,
        color_gs=lam * ((1.0 - weights.lambda_c) * g_l1 - weights.lambda_c * g_ssim),
        scales=lam * weights.lambda_s * g_scale,
        value_rgb=v_l1,
        value_ssim=v_ssim,
        value_geo_hf=v1,
        value_geo_prior=v2,
        value_scaling=v_scale,
    )
    return value, grads


def psnr(img_a: np.ndarray, img_b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]."""
    diff = (np.asarray(img_a, dtype=np.float64) - np.asarray(img_b, dtype=np.float64)) ** 2
    if mask is not None:
        if diff.ndim == 3:
            diff = diff[mask]
        else:
            diff = diff[mask]
    mse = float(diff.mean())
    if mse == 0.0:
        return float("inf")
    return float(-10.0 * np.log10(mse))
