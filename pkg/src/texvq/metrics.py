"""Full-reference image metrics and the decomposition-probe statistics."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

SSIM_WINDOW = 7
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; +inf when identical."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _ssim_channel(x: np.ndarray, y: np.ndarray) -> float:
    w = SSIM_WINDOW
    n = w * w
    cov_norm = n / (n - 1)  # sample covariance inside each window
    ux = ndimage.uniform_filter(x, size=w, mode="reflect")
    uy = ndimage.uniform_filter(y, size=w, mode="reflect")
    uxx = ndimage.uniform_filter(x * x, size=w, mode="reflect")
    uyy = ndimage.uniform_filter(y * y, size=w, mode="reflect")
    uxy = ndimage.uniform_filter(x * y, size=w, mode="reflect")
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    s = ((2 * ux * uy + SSIM_C1) * (2 * vxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
    pad = (w - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of a (C, H, W) pair, averaged over channels; 7x7 uniform window, data range 1."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on a side")
    return float(np.mean([_ssim_channel(a[c], b[c]) for c in range(a.shape[0])]))


def gradient_energy(img: np.ndarray) -> float:
    """Mean forward-difference gradient magnitude over all channels."""
    img = np.asarray(img, dtype=np.float64)
    dx = img[..., :-1, 1:] - img[..., :-1, :-1]
    dy = img[..., 1:, :-1] - img[..., :-1, :-1]
    return float(np.mean(np.sqrt(dx * dx + dy * dy)))


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation over all pixels; 0 when either side is constant."""
    a, b = _check_pair(a, b)
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    denom = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.sum(a * b) / denom) if denom > 0 else 0.0


def upsample_bicubic(img: np.ndarray, factor: int) -> np.ndarray:
    """Cubic-spline upsampling of a (C, h, w) image by an integer factor."""
    img = np.asarray(img, dtype=np.float64)
    return np.stack([ndimage.zoom(ch, factor, order=3, mode="nearest", grid_mode=True) for ch in img])


def per_image(metric, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.array([metric(a, b) for a, b in zip(A, B)])
