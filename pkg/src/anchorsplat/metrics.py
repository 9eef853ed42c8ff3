"""Masked PSNR and SSIM."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DatasetError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    per_frame: list = field(default_factory=list)  # (frame index, psnr, ssim)


def _check(a, b, mask):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DatasetError(f"image shapes differ: {a.shape} vs {b.shape}")
    m = np.ones(a.shape[:2]) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != a.shape[:2]:
        raise DatasetError("mask does not match image size")
    if not (m > 0).any():
        raise DatasetError("mask is empty")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b, m > 0


def psnr(a, b, mask=None) -> float:
    """10 log10(1 / MSE) over masked pixels and channels, capped at 99 dB."""
    a, b, m = _check(a, b, mask)
    mse = float(np.mean((a[m] - b[m]) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, mask=None) -> float:
    """Mean single-scale SSIM over windows lying entirely inside the mask."""
    a, b, m = _check(a, b, mask)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise DatasetError(f"image {a.shape[1]}x{a.shape[0]} is smaller than the "
                           f"{SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = gaussian_window()
    valid = sliding_window_view(m, win.shape).all(axis=(-2, -1))
    if not valid.any():
        raise DatasetError("no SSIM window lies fully inside the mask")
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2

    def filt(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, win.shape), win)

    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = filt(x), filt(y)
        vx = filt(x * x) - mx * mx
        vy = filt(y * y) - my * my
        cov = filt(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        scores.append(s[valid].mean())
    return float(np.mean(scores))


def evaluate(renders, frames) -> MetricReport:
    """Per-frame and mean PSNR/SSIM of rendered colors against frames' ground truth."""
    rows = []
    for img, fr in zip(renders, frames):
        color = np.clip(img, 0.0, 1.0)
        rows.append((fr.index, psnr(color, fr.color, fr.mask), ssim(color, fr.color, fr.mask)))
    if not rows:
        return MetricReport(float("nan"), float("nan"), [])
    return MetricReport(float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows])),
                        rows)
