"""Image and geometry metrics, and the composite rendering losses."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, EmptySet, TooSmall

PSNR_CAP = 99.0
BETA_L1 = 0.8
BETA_SSIM = 0.2
LAMBDA_FINE = 0.5
LAMBDA_HIGH = 0.5

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for intensities in [0, 1], capped at 99 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = len(w) // 2
    out = correlate1d(img, w, axis=0, mode="constant")
    out = correlate1d(out, w, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim_map(a, b) -> np.ndarray:
    """Local SSIM over every fully-contained 11x11 window of a single-channel pair."""
    w = gaussian_window()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a**2
    var_b = _filter_valid(b * b, w) - mu_b**2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b) -> float:
    """Mean structural similarity, computed per channel and averaged."""
    a, b = _check_pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise TooSmall(f"SSIM needs both sides >= {SSIM_WINDOW}, got {a.shape[:2]}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    vals = [ssim_map(a[..., c], b[..., c]).mean() for c in range(a.shape[2])]
    return float(np.mean(vals))


def l_render(pred, gt, beta1: float = BETA_L1, beta2: float = BETA_SSIM) -> float:
    """``beta1 * L1 + beta2 * (1 - SSIM)``."""
    pred, gt = _check_pair(pred, gt)
    l1 = float(np.mean(np.abs(pred - gt)))
    return beta1 * l1 + beta2 * (1.0 - ssim(pred, gt))


def stage2_loss(
    pred_fine, gt_fine, pred_high, gt_high, lambda1: float = LAMBDA_FINE, lambda2: float = LAMBDA_HIGH
) -> float:
    return lambda1 * l_render(pred_fine, gt_fine) + lambda2 * l_render(pred_high, gt_high)


def nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Euclidean distance from every row of ``src`` to its nearest row of ``dst``.

    The k-d tree only picks the neighbour; the distance is recomputed
    directly so results match an exhaustive search bit for bit.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) == 0 or len(dst) == 0:
        raise EmptySet("nearest-neighbour query on an empty point set")
    tree = cKDTree(dst)
    k = min(4, len(dst))
    _, idx = tree.query(src, k=k)
    idx = idx.reshape(len(src), k)
    # exact recomputation; the extra neighbours guard against kd-tree rounding ties
    diff = src[:, None, :] - dst[idx]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    return d.min(axis=1)


def chamfer_eval(pred, gt) -> tuple[float, float]:
    """Directed mean nearest-neighbour distances ``(pred -> gt, gt -> pred)`` in 3-D."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise EmptySet("chamfer_eval needs non-empty point sets")
    return float(nearest_distances(pred, gt).mean()), float(nearest_distances(gt, pred).mean())
