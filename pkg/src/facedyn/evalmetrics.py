"""Image and landmark metrics, plus pixel and identity losses."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 255.0


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for 8-bit images; ``math.inf`` when the images are identical."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(DATA_RANGE ** 2 / mse))


def luma(image) -> np.ndarray:
    """BT.601 luma for HxWx3 input; 2D input is returned as float."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] >= 3:
        return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    raise ValueError(f"expected HxW or HxWx3 image, got {img.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows of the luma channel."""
    a, b = _pair(a, b)
    x, y = luma(a), luma(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    win = gaussian_window()
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2

    def filt(img):
        return np.einsum("ijkl,kl->ij", sliding_window_view(img, win.shape), win)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def lrms(pred, truth, normalize: bool = True) -> float:
    """Point-to-point landmark RMS for 2xM sets, optionally over the truth bbox diagonal."""
    p, q = _pair(pred, truth)
    if p.ndim != 2 or p.shape[0] != 2 or p.shape[1] < 1:
        raise ValueError(f"landmarks must be 2xM with M >= 1, got {p.shape}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise ValueError("landmarks contain non-finite values")
    err = math.sqrt(float(np.mean(np.sum((p - q) ** 2, axis=0))))
    if normalize:
        diag = float(np.linalg.norm(q.max(axis=1) - q.min(axis=1)))
        if diag == 0:
            raise ValueError("truth landmarks have a zero-size bounding box")
        err /= diag
    return err


def pixel_loss(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sum((a - b) ** 2))


def identity_loss(e1, e2) -> float:
    """Squared distance between L2-normalized embeddings (in [0, 4])."""
    u, v = _pair(e1, e2)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("identity embedding has zero norm")
    return float(np.sum((u / nu - v / nv) ** 2))


def smoothness(landmark_seq) -> float:
    """Mean un-normalized landmark RMS between consecutive frames of a 2xM sequence."""
    seq = [np.asarray(l, dtype=np.float64) for l in landmark_seq]
    if len(seq) < 2:
        return 0.0
    return float(np.mean([lrms(seq[t + 1], seq[t], normalize=False) for t in range(len(seq) - 1)]))
