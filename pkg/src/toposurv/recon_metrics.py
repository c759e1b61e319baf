"""Reconstruction fidelity metrics and tumor / non-tumor error split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

PSNR_EPS = 1e-8
SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
MAX_SSIM_SLICES = 16


class EmptyRegion(ValueError):
    pass


@dataclass
class ReconReport:
    patient_id: str
    split: str
    mae: float
    mse: float
    psnr: float
    ssim: float
    mae_tumor: float
    mae_nontumor: float
    mae_per_modality: tuple[float, ...] = ()
    mse_per_modality: tuple[float, ...] = ()


def mae_mse(x: np.ndarray, xhat: np.ndarray):
    """Per-modality and channel-averaged MAE/MSE for [4, D, H, W] pairs."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {xhat.shape}")
    diff = x - xhat
    axes = tuple(range(1, x.ndim))
    mae_c = np.abs(diff).mean(axis=axes)
    mse_c = (diff * diff).mean(axis=axes)
    return float(mae_c.mean()), float(mse_c.mean()), mae_c, mse_c


def psnr(mse: float, eps: float = PSNR_EPS) -> float:
    """10*log10(1/(MSE+eps)) for unit-range signals."""
    if mse < 0:
        raise ValueError("MSE must be nonnegative")
    return float(10.0 * np.log10(1.0 / (mse + eps)))


def _ssim_2d(a: np.ndarray, b: np.ndarray) -> float:
    mu_a = uniform_filter(a, SSIM_WINDOW, mode="reflect")
    mu_b = uniform_filter(b, SSIM_WINDOW, mode="reflect")
    var_a = uniform_filter(a * a, SSIM_WINDOW, mode="reflect") - mu_a * mu_a
    var_b = uniform_filter(b * b, SSIM_WINDOW, mode="reflect") - mu_b * mu_b
    cov = uniform_filter(a * b, SSIM_WINDOW, mode="reflect") - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def ssim_slice_indices(depth: int) -> np.ndarray:
    """Axial indices between 20% and 80% of depth, thinned to at most 16."""
    lo = int(np.ceil(0.2 * depth))
    hi = int(np.floor(0.8 * depth))
    idx = np.arange(lo, hi + 1)
    stride = int(np.ceil(len(idx) / MAX_SSIM_SLICES))
    return idx[::max(1, stride)]


def ssim_slices(x: np.ndarray, xhat: np.ndarray) -> float:
    """Mean 7x7-uniform-window SSIM over mid-depth axial slices and channels."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {xhat.shape}")
    depth = x.shape[1]
    if depth < 5:
        raise ValueError(f"need depth >= 5, got {depth}")
    scores = [
        _ssim_2d(x[c, z], xhat[c, z])
        for c in range(x.shape[0])
        for z in ssim_slice_indices(depth)
    ]
    return float(np.mean(scores))


def region_mae(x: np.ndarray, xhat: np.ndarray, mask: np.ndarray):
    """Channel-averaged MAE restricted to the mask and to its complement."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[1:]:
        raise ValueError(f"mask {mask.shape} vs volume {x.shape}")
    if not mask.any() or mask.all():
        raise EmptyRegion("both tumor and non-tumor regions must be nonempty")
    err = np.abs(x - xhat)
    inside = float(err[:, mask].mean(axis=1).mean())
    outside = float(err[:, ~mask].mean(axis=1).mean())
    return inside, outside


def bootstrap_ci(values, n_resamples: int = 1000, seed: int = 0,
                 level: float = 0.95):
    """Seeded bootstrap CI of the mean: (mean, lower, upper)."""
    values = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(seed)
    means = rng.choice(values, size=(n_resamples, values.size), replace=True).mean(axis=1)
    tail = (1.0 - level) / 2.0
    return (float(values.mean()),
            float(np.quantile(means, tail)),
            float(np.quantile(means, 1.0 - tail)))
