"""Input validation helpers used at public API boundaries."""
from __future__ import annotations

import numpy as np

from .exceptions import DimensionError


def check_image(x, name="x", *, allow_real=True):
    """Return ``x`` as a 2D complex128 array."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError(f"{name} must be 2D (H, W), got shape {x.shape}")
    if not allow_real and not np.iscomplexobj(x):
        raise DimensionError(f"{name} must be complex")
    x = x.astype(np.complex128, copy=False)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_kspace(y, name="y"):
    """Return ``y`` as a ``(C, H, W)`` complex128 array."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise DimensionError(f"{name} must be (C, H, W), got shape {y.shape}")
    y = y.astype(np.complex128, copy=False)
    if not np.all(np.isfinite(y)):
        raise ValueError(f"{name} contains non-finite values")
    return y


def check_coils(coils, shape=None):
    coils = check_kspace(coils, name="coils")
    if shape is not None and coils.shape[-2:] != tuple(shape):
        raise DimensionError(
            f"coil maps have shape {coils.shape[-2:]}, image has shape {tuple(shape)}"
        )
    return coils


def check_consistent(y, coils):
    if y.shape != coils.shape:
        raise DimensionError(f"k-space shape {y.shape} does not match coils {coils.shape}")


def check_real_image(a, name="a"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2D, got shape {a.shape}")
    return a


def check_same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")
