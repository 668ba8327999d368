"""Centered orthonormal FFTs and seeded random streams.

Conventions
-----------
Images and k-space are complex128 arrays whose last two axes are
``(rows, cols)``. The centered transform is
``fftshift(fft2(ifftshift(x), norm="ortho"))``, so the DC coefficient sits at
index ``(H // 2, W // 2)`` and the image origin is the same index. The
transform is unitary: ``ifft2c`` is both inverse and adjoint of ``fft2c``.

Random numbers come from numpy's PCG64 bit generator seeded by a
``SeedSequence(seed, spawn_key=(stream_id,))``. Normal variates use numpy's
ziggurat sampler, which is platform independent for a given bit stream.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .exceptions import DimensionError, ParameterError

RNG_ALGORITHM = "numpy-PCG64/SeedSequence"

# Stream ids for each purpose, so experiments can be replayed piecewise.
STREAM_PHANTOM = 1
STREAM_COILS = 2
STREAM_MOTION = 3
STREAM_NOISE = 4
STREAM_WEIGHT_INIT = 5
STREAM_TRIAL_INIT = 6
STREAM_BATCHING = 7


def fft2c(x):
    """Centered unitary 2D FFT over the last two axes."""
    x = np.asarray(x)
    if x.ndim < 2:
        raise DimensionError(f"expected at least 2 dimensions, got {x.ndim}")
    axes = (-2, -1)
    return np.fft.fftshift(
        np.fft.fft2(np.fft.ifftshift(x, axes=axes), norm="ortho"), axes=axes
    )


def ifft2c(k):
    """Centered unitary inverse 2D FFT over the last two axes."""
    k = np.asarray(k)
    if k.ndim < 2:
        raise DimensionError(f"expected at least 2 dimensions, got {k.ndim}")
    axes = (-2, -1)
    return np.fft.fftshift(
        np.fft.ifft2(np.fft.ifftshift(k, axes=axes), norm="ortho"), axes=axes
    )


@lru_cache(maxsize=16)
def centered_dft_matrix(n: int) -> np.ndarray:
    """Matrix of the centered unitary 1D DFT, so ``fft2c(x) = F_H @ x @ F_W.T``."""
    eye = np.eye(int(n))
    mat = np.fft.fftshift(np.fft.fft(np.fft.ifftshift(eye, axes=0), axis=0, norm="ortho"), axes=0)
    mat.setflags(write=False)
    return mat


def fft2c_rows(x, rows):
    """Rows ``rows`` of ``fft2c(x)``, computed without the other rows."""
    x = np.asarray(x)
    H, W = x.shape[-2:]
    return centered_dft_matrix(H)[rows] @ x @ centered_dft_matrix(W).T


@lru_cache(maxsize=16)
def _inverse_dft_matrix(n: int) -> np.ndarray:
    mat = np.ascontiguousarray(centered_dft_matrix(n).conj().T)
    mat.setflags(write=False)
    return mat


def ifft2c_rows(k_rows, rows, H: int):
    """``ifft2c`` of a k-space that is zero outside ``rows``; ``k_rows`` holds
    only those rows. Adjoint of :func:`fft2c_rows`."""
    k_rows = np.asarray(k_rows)
    W = k_rows.shape[-1]
    return _inverse_dft_matrix(H)[:, rows] @ (k_rows @ _inverse_dft_matrix(W).T)


def _check_plane(x):
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2D array, got shape {x.shape}")
    if min(x.shape) < 2:
        raise DimensionError(f"both sides must be >= 2, got shape {x.shape}")
    return x


def fft2_centered(img):
    """Unitary centered 2D DFT of a single ``(H, W)`` image."""
    return fft2c(_check_plane(img).astype(np.complex128, copy=False))


def ifft2_centered(ksp):
    """Inverse (and adjoint) of :func:`fft2_centered`."""
    return ifft2c(_check_plane(ksp).astype(np.complex128, copy=False))


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Each call to :meth:`generator` restarts the stream from its beginning, so
    two consumers holding equal streams draw identical sequences.
    """

    seed: int
    stream_id: int = 0

    algorithm = RNG_ALGORITHM

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, index: int) -> "RngStream":
        """Derive an independent stream, e.g. one per record or per trial."""
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id), int(index)))
        return RngStream(int(ss.generate_state(1, dtype=np.uint64)[0]), self.stream_id)


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


def gaussian_sample(rng, n: int, sigma: float) -> np.ndarray:
    """Draw ``n`` i.i.d. N(0, sigma^2) samples from ``rng``."""
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if n < 0:
        raise ParameterError(f"n must be >= 0, got {n}")
    gen = as_generator(rng)
    out = gen.standard_normal(int(n))
    return out * float(sigma)


def complex_gaussian(rng, shape, sigma: float) -> np.ndarray:
    """Complex noise with independent N(0, sigma^2) real and imaginary parts."""
    gen = as_generator(rng)
    n = int(np.prod(shape))
    draws = gaussian_sample(gen, 2 * n, sigma)
    return (draws[:n] + 1j * draws[n:]).reshape(shape)
