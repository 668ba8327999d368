"""Non-uniform discrete Fourier transforms.

Points are ``(k_x, k_y)`` pairs in cycles per field of view, using the same
centered, orthonormal convention as :func:`hypermoco.numerics.fft2c`: the
integer point ``(kx, ky)`` reproduces ``fft2c(img)[ky + H // 2, kx + W // 2]``.

:func:`nudft` is an exact direct sum and serves as the reference.
:func:`nufft` is a Kaiser-Bessel gridding approximation of the same map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import i0

from .exceptions import DimensionError, ParameterError


@dataclass
class NonUniformSamples:
    """Coordinates and per-coil values of off-grid k-space samples."""

    points: np.ndarray  # (P, 2) as (kx, ky)
    values: np.ndarray  # (C, P)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.complex128))
        if self.values.shape[-1] != self.points.shape[0]:
            raise DimensionError("one value per point and coil is required")


def check_points(points, shape) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise DimensionError(f"points must be (P, 2), got {points.shape}")
    H, W = shape
    if np.any(np.abs(points[:, 0]) > W / 2) or np.any(np.abs(points[:, 1]) > H / 2):
        raise ParameterError("points must satisfy |kx| <= W/2 and |ky| <= H/2")
    return points


def _factors(points, shape):
    H, W = shape
    qy = np.arange(H) - H // 2
    qx = np.arange(W) - W // 2
    ay = np.exp(-2j * np.pi * np.outer(points[:, 1], qy) / H)  # (P, H)
    bx = np.exp(-2j * np.pi * np.outer(points[:, 0], qx) / W)  # (P, W)
    return ay, bx


def nudft(points, img) -> np.ndarray:
    """Direct type-2 transform of ``img`` (``(..., H, W)``) at ``points``."""
    img = np.asarray(img, dtype=np.complex128)
    if img.ndim < 2:
        raise DimensionError("image must have at least 2 dimensions")
    shape = img.shape[-2:]
    points = check_points(points, shape)
    ay, bx = _factors(points, shape)
    t = img @ bx.T  # (..., H, P)
    vals = np.einsum("ph,...hp->...p", ay, t)
    return vals / np.sqrt(shape[0] * shape[1])


def nudft_adjoint(points, values, shape) -> np.ndarray:
    """Exact adjoint of :func:`nudft` (type-1 sum onto the image grid)."""
    shape = tuple(int(s) for s in shape)
    points = check_points(points, shape)
    values = np.asarray(values, dtype=np.complex128)
    ay, bx = _factors(points, shape)
    weighted = values[..., :, None] * bx.conj()  # (..., P, W)
    img = np.einsum("ph,...pw->...hw", ay.conj(), weighted)
    return img / np.sqrt(shape[0] * shape[1])


# ---------------------------------------------------------------------------
# Kaiser-Bessel gridding
# ---------------------------------------------------------------------------


def _kb_beta(width, osf):
    return np.pi * np.sqrt((width / osf) ** 2 * (osf - 0.5) ** 2 - 0.8)


def _kb_kernel(u, width, beta):
    arg = 1.0 - (2.0 * u / width) ** 2
    out = np.zeros_like(u)
    inside = arg >= 0
    out[inside] = i0(beta * np.sqrt(arg[inside]))
    return out


def _kb_ft(nu, width, beta):
    """Continuous Fourier transform of the kernel at ``nu`` cycles per grid step."""
    z = beta**2 - (np.pi * width * nu) ** 2
    out = np.empty_like(nu)
    pos = z > 0
    r = np.sqrt(z[pos])
    out[pos] = width * np.sinh(r) / r
    r = np.sqrt(-z[~pos])
    out[~pos] = width * np.sinc(r / np.pi)
    return out


class GriddedNUFFT:
    """Kaiser-Bessel gridding NUFFT for a fixed image shape and point set."""

    def __init__(self, points, shape, oversamp: float = 2.0, width: int = 6):
        self.shape = tuple(int(s) for s in shape)
        self.points = check_points(points, self.shape)
        self.width = int(width)
        self.osf = float(oversamp)
        self.beta = _kb_beta(self.width, self.osf)
        H, W = self.shape
        self.grid = (int(np.ceil(self.osf * H)), int(np.ceil(self.osf * W)))
        Hg, Wg = self.grid
        qy = np.arange(H) - H // 2
        qx = np.arange(W) - W // 2
        self._apod = np.outer(
            _kb_ft(qy / Hg, self.width, self.beta), _kb_ft(qx / Wg, self.width, self.beta)
        )
        # interpolation stencil: rows of (grid index, weight) per point and axis
        self._idx_y, self._w_y = self._stencil(self.points[:, 1] * Hg / H, Hg)
        self._idx_x, self._w_x = self._stencil(self.points[:, 0] * Wg / W, Wg)
        self._scale = 1.0 / np.sqrt(H * W)

    def _stencil(self, kappa, n):
        half = self.width / 2
        start = np.ceil(kappa - half).astype(np.int64)
        offs = np.arange(self.width + 1)
        j = start[:, None] + offs[None, :]
        w = _kb_kernel(kappa[:, None] - j, self.width, self.beta)
        return np.mod(j + n // 2, n), w

    def _pad(self, img):
        H, W = self.shape
        Hg, Wg = self.grid
        out = np.zeros(img.shape[:-2] + self.grid, dtype=np.complex128)
        y0 = Hg // 2 - H // 2
        x0 = Wg // 2 - W // 2
        out[..., y0:y0 + H, x0:x0 + W] = img
        return out

    def _crop(self, grid):
        H, W = self.shape
        Hg, Wg = self.grid
        y0 = Hg // 2 - H // 2
        x0 = Wg // 2 - W // 2
        return grid[..., y0:y0 + H, x0:x0 + W]

    def forward(self, img) -> np.ndarray:
        img = np.asarray(img, dtype=np.complex128)
        g = self._pad(img / self._apod)
        axes = (-2, -1)
        G = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(g, axes=axes)), axes=axes)
        iy, ix = self._idx_y, self._idx_x
        sub = G[..., iy[:, :, None], ix[:, None, :]]  # (..., P, wy, wx)
        vals = np.einsum("...pij,pi,pj->...p", sub, self._w_y, self._w_x)
        return vals * self._scale

    def adjoint(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.complex128)
        lead = values.shape[:-1]
        Hg, Wg = self.grid
        G = np.zeros(lead + (Hg * Wg,), dtype=np.complex128)
        flat = (self._idx_y[:, :, None] * Wg + self._idx_x[:, None, :]).reshape(len(self.points), -1)
        w = (self._w_y[:, :, None] * self._w_x[:, None, :]).reshape(len(self.points), -1)
        contrib = values[..., :, None] * w  # (..., P, K)
        G2 = G.reshape(-1, Hg * Wg)
        c2 = contrib.reshape(-1, *contrib.shape[-2:])
        for b in range(G2.shape[0]):
            np.add.at(G2[b], flat.ravel(), c2[b].ravel())
        G = G2.reshape(lead + (Hg, Wg))
        axes = (-2, -1)
        g = np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(G, axes=axes)), axes=axes) * (Hg * Wg)
        return self._crop(g) / self._apod.conj() * self._scale


def nufft(points, img, oversamp: float = 2.0, width: int = 6) -> np.ndarray:
    img = np.asarray(img)
    return GriddedNUFFT(points, img.shape[-2:], oversamp, width).forward(img)


def nufft_adjoint(points, values, shape, oversamp: float = 2.0, width: int = 6) -> np.ndarray:
    return GriddedNUFFT(points, shape, oversamp, width).adjoint(values)
