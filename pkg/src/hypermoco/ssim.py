"""Structural similarity (Gaussian-weighted, valid-window mean).

One implementation serves both the differentiable training loss and the
evaluation metric: 11x11 Gaussian window with sigma 1.5, ``K1 = 0.01``,
``K2 = 0.03``, statistics computed only where the window fits entirely
inside the image.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import DimensionError, ParameterError

WIN_SIZE = 11
WIN_SIGMA = 1.5
K1 = 0.01
K2 = 0.03


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter(img, win):
    # img (N, 1, H, W); separable valid filtering
    g = win.sum(dim=1)
    out = F.conv2d(img, g.view(1, 1, -1, 1))
    return F.conv2d(out, g.view(1, 1, 1, -1))


def ssim_map_torch(a: torch.Tensor, b: torch.Tensor, dynamic_range: float = 1.0) -> torch.Tensor:
    """Local SSIM map for images shaped ``(..., H, W)``."""
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if dynamic_range <= 0:
        raise ParameterError("dynamic_range must be positive")
    H, W = a.shape[-2:]
    if H < WIN_SIZE or W < WIN_SIZE:
        raise DimensionError(f"images must be at least {WIN_SIZE}x{WIN_SIZE}")
    lead = a.shape[:-2]
    a4 = a.reshape(-1, 1, H, W)
    b4 = b.reshape(-1, 1, H, W)
    win = torch.as_tensor(gaussian_window(), dtype=a.dtype, device=a.device)
    c1 = (K1 * dynamic_range) ** 2
    c2 = (K2 * dynamic_range) ** 2
    mu_a = _filter(a4, win)
    mu_b = _filter(b4, win)
    saa = _filter(a4 * a4, win) - mu_a * mu_a
    sbb = _filter(b4 * b4, win) - mu_b * mu_b
    sab = _filter(a4 * b4, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    smap = num / den
    return smap.reshape(*lead, *smap.shape[-2:])


def ssim_torch(a: torch.Tensor, b: torch.Tensor, dynamic_range: float = 1.0) -> torch.Tensor:
    """Mean SSIM over the last two axes (differentiable)."""
    return ssim_map_torch(a, b, dynamic_range).mean(dim=(-2, -1))


def ssim(a, b, dynamic_range: float = 1.0) -> float:
    """Mean SSIM of two real images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("ssim expects 2D images")
    return float(ssim_torch(torch.from_numpy(a), torch.from_numpy(b), dynamic_range))
