"""Classical reconstructions: RSS, GRAPPA-style interpolation, CG least squares
and the known-motion model-based correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.ndimage import map_coordinates

from .exceptions import CalibrationError, DivergenceError, ParameterError, SolverError
from .forward import (
    MotionParams,
    ShotPattern,
    acs_rows,
    adjoint,
    apply_rigid_motion,
    check_motion,
    forward,
    translation_ramp,
)
from .numerics import fft2c, ifft2c
from .nufft import GriddedNUFFT, nudft, nudft_adjoint
from .validation import check_coils, check_kspace

DEFAULT_CG_ITERS = 30
DEFAULT_CG_TOL = 1e-6
DEFAULT_LAMBDA_REL = 1e-3
DEFAULT_MB_ITERS = 300
DEFAULT_MB_TOL = 1e-10


def rss_recon(y) -> np.ndarray:
    """Per-coil inverse FFT followed by root-sum-of-squares combination."""
    y = check_kspace(y)
    return np.sqrt(np.sum(np.abs(ifft2c(y)) ** 2, axis=0))


def rss(coil_images) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(coil_images) ** 2, axis=0))


# ---------------------------------------------------------------------------
# GRAPPA-style autocalibrating interpolation
# ---------------------------------------------------------------------------


@dataclass
class ArcKernels:
    """Calibrated interpolation weights, one set per source-row geometry."""

    kernel: tuple
    weights: dict = field(default_factory=dict)  # offsets -> (n_src, C) matrix
    sources: dict = field(default_factory=dict)  # missing row -> offsets


def _source_offsets(r, acquired, n_rows):
    above = [a for a in acquired if a < r][::-1]
    below = [a for a in acquired if a > r]
    half = n_rows // 2
    take_a = min(half, len(above))
    take_b = min(n_rows - take_a, len(below))
    take_a = min(n_rows - take_b, len(above))
    rows = above[:take_a][::-1] + below[:take_b]
    return tuple(a - r for a in rows)


def _patches(y, rows, n_cols):
    """Source features ``(len(cols), C * len(rows) * n_cols)`` for each column."""
    C, _, W = y.shape
    half = n_cols // 2
    padded = np.pad(y[:, rows, :], ((0, 0), (0, 0), (half, half)))
    feats = [padded[:, :, d:d + W] for d in range(n_cols)]  # each (C, nr, W)
    return np.stack(feats, axis=-1).transpose(2, 0, 1, 3).reshape(W, -1)


def arc_calibrate(y, pattern: ShotPattern, kernel=(2, 3), ridge: float = 1e-4) -> ArcKernels:
    """Fit per-geometry interpolation kernels on the fully sampled ACS block.

    ``ridge`` is relative to the normalized trace (mean diagonal) of each
    calibration Gram matrix.
    """
    y = check_kspace(y)
    n_rows, n_cols = (int(v) for v in kernel)
    if n_rows < 1 or n_cols < 1 or n_cols % 2 == 0:
        raise ParameterError(f"kernel must be (rows >= 1, odd cols), got {kernel}")
    if ridge < 0:
        raise ParameterError("ridge must be >= 0")
    acquired = sorted(int(r) for r in pattern.acquired_rows)
    acq_set = set(acquired)
    missing = [r for r in range(pattern.H) if r not in acq_set]
    out = ArcKernels((n_rows, n_cols))
    if not missing:
        return out
    calib = [int(r) for r in acs_rows(pattern.H, pattern.acs) if int(r) in acq_set]
    if len(calib) < 2:
        raise CalibrationError(f"need a fully sampled ACS block, got {pattern.acs} rows")
    calib_set = set(calib)
    C = y.shape[0]
    for r in missing:
        offs = _source_offsets(r, acquired, n_rows)
        if not offs:
            raise CalibrationError(f"row {r} has no acquired neighbours")
        out.sources[r] = offs
        if offs in out.weights:
            continue
        targets = [t for t in calib if all(t + o in calib_set for o in offs)]
        n_feat = C * len(offs) * n_cols
        if len(targets) * y.shape[-1] < n_feat:
            raise CalibrationError(
                f"ACS block too small for source offsets {offs}: "
                f"{len(targets) * y.shape[-1]} equations, {n_feat} unknowns"
            )
        A = np.concatenate([_patches(y, [t + o for o in offs], n_cols) for t in targets])
        B = np.concatenate([y[:, t, :].T for t in targets])  # (n_eq, C)
        gram = A.conj().T @ A
        lam = ridge * np.real(np.trace(gram)) / n_feat
        lhs = gram + lam * np.eye(n_feat)
        if lam == 0 and np.linalg.cond(lhs) > 1e12:
            raise SolverError("calibration system is singular; use ridge > 0")
        try:
            out.weights[offs] = np.linalg.solve(lhs, A.conj().T @ B)
        except np.linalg.LinAlgError as exc:
            raise SolverError("calibration solve failed; use ridge > 0") from exc
    return out


def arc_apply(y, kernels: ArcKernels) -> np.ndarray:
    """Fill missing rows of ``y`` using calibrated kernels (linear in ``y``)."""
    y = check_kspace(y)
    out = y.copy()
    _, n_cols = kernels.kernel
    for r, offs in kernels.sources.items():
        feats = _patches(y, [r + o for o in offs], n_cols)
        out[:, r, :] = (feats @ kernels.weights[offs]).T
    return out


def arc_interp(y, pattern: ShotPattern, kernel=(2, 3), ridge: float = 1e-4) -> np.ndarray:
    """GRAPPA-style autocalibrated interpolation to fully sampled k-space."""
    return arc_apply(y, arc_calibrate(y, pattern, kernel, ridge))


# ---------------------------------------------------------------------------
# Conjugate-gradient least squares
# ---------------------------------------------------------------------------


class CGResult(NamedTuple):
    x: np.ndarray
    rel_residual: float
    residuals: list
    iterations: int
    lam: float


def cgls(apply_a, apply_ah, y, lam: float, x0, iters: int, tol: float) -> CGResult:
    """CGLS for ``min ||y - A x||^2 + lam ||x||^2``.

    ``residuals`` tracks ``sqrt(||y - A x||^2 + lam ||x||^2) / ||y||``, which is
    non-increasing. Iteration stops when the normal-equation residual falls
    below ``tol`` relative to ``||A^H y||``.
    """
    if lam < 0:
        raise ParameterError("lambda must be >= 0")
    if iters < 1:
        raise ParameterError("iters must be >= 1")
    ynorm = np.sqrt(np.vdot(y, y).real) or 1.0
    x = np.array(x0, dtype=np.complex128, copy=True)
    r = y - apply_a(x)
    s = apply_ah(r) - lam * x
    ref = np.linalg.norm(apply_ah(y)) or 1.0
    p = s.copy()
    gamma = np.vdot(s, s).real
    residuals = [np.sqrt(np.vdot(r, r).real + lam * np.vdot(x, x).real) / ynorm]
    k = 0
    while k < iters and np.sqrt(gamma) > tol * ref:
        q = apply_a(p)
        delta = np.vdot(q, q).real + lam * np.vdot(p, p).real
        if not np.isfinite(delta):
            raise DivergenceError(f"non-finite step at iteration {k}")
        if delta == 0:
            break
        alpha = gamma / delta
        x = x + alpha * p
        r = r - alpha * q
        s = apply_ah(r) - lam * x
        gamma_new = np.vdot(s, s).real
        res = np.sqrt(np.vdot(r, r).real + lam * np.vdot(x, x).real) / ynorm
        if not (np.isfinite(res) and np.isfinite(gamma_new)):
            raise DivergenceError(f"non-finite residual at iteration {k}")
        residuals.append(res)
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
        k += 1
    return CGResult(x, residuals[-1], residuals, k, lam)


def default_lambda(aty) -> float:
    return DEFAULT_LAMBDA_REL * float(np.max(np.abs(aty))) if np.size(aty) else 0.0


def cg_lsq(
    y,
    coils,
    pattern: ShotPattern,
    m: MotionParams,
    lam: float | None = None,
    iters: int = DEFAULT_CG_ITERS,
    tol: float = DEFAULT_CG_TOL,
    x0=None,
) -> CGResult:
    """Solve ``(A^H A + lam I) x = A^H y`` for the motion operator ``A(m)``."""
    y = check_kspace(y)
    coils = check_coils(coils, y.shape[-2:])
    check_motion(m, pattern)
    mask = pattern.row_mask()[None, :, None]
    y = y * mask
    aty = adjoint(y, coils, pattern, m)
    if lam is None:
        lam = default_lambda(aty)
    x0 = np.zeros(y.shape[-2:], dtype=np.complex128) if x0 is None else x0
    return cgls(
        lambda x: forward(x, coils, pattern, m),
        lambda r: adjoint(r, coils, pattern, m),
        y,
        lam,
        x0,
        iters,
        tol,
    )


# ---------------------------------------------------------------------------
# Model-based correction with known motion
# ---------------------------------------------------------------------------


def _moved_coils(coils, triple, spacing):
    """Coil maps seen from the object frame: ``C(R q + t)``."""
    dh, dv, th = (float(v) for v in triple)
    if dh == 0.0 and dv == 0.0 and th == 0.0:
        return coils
    H, W = coils.shape[-2:]
    cy, cx = H // 2, W // 2
    rr, cc = np.meshgrid(np.arange(H) - cy, np.arange(W) - cx, indexing="ij")
    t = np.deg2rad(th)
    xs = np.cos(t) * cc - np.sin(t) * rr + dh / spacing + cx
    ys = np.sin(t) * cc + np.cos(t) * rr + dv / spacing + cy
    out = np.empty_like(coils)
    for i, cmap in enumerate(coils):
        re = map_coordinates(cmap.real, [ys, xs], order=3, mode="nearest")
        im = map_coordinates(cmap.imag, [ys, xs], order=3, mode="nearest")
        out[i] = re + 1j * im
    return out


@dataclass
class _ShotModel:
    rows: np.ndarray
    coils: np.ndarray
    data: np.ndarray  # (C, P) corrected samples, or (C, n_rows, W) on grid
    points: np.ndarray | None = None  # (P, 2) when rotated
    keep: np.ndarray | None = None
    op: object = None


def model_based_samples(y, coils, pattern: ShotPattern, m: MotionParams, *, nufft: str = "direct"):
    """Undo each shot's translation and rotate its k-space coordinates.

    Returns one model per shot holding the phase-corrected samples, their
    rotated coordinates (points beyond the band limit are dropped) and the
    coil maps expressed in the object frame.
    """
    y = check_kspace(y)
    coils = check_coils(coils, y.shape[-2:])
    check_motion(m, pattern)
    H, W = y.shape[-2:]
    ky_all = np.arange(H) - H // 2
    kx_all = np.arange(W) - W // 2
    models = []
    for s in range(1, pattern.S + 1):
        rows = pattern.shot_rows(s)
        dh, dv, th = (float(v) for v in m.triples[s - 1])
        ramp = translation_ramp((H, W), dh, dv, m.pixel_spacing)
        data = y[:, rows, :] * ramp[rows].conj()
        cmaps = _moved_coils(coils, (dh, dv, th), m.pixel_spacing)
        if th == 0.0:
            models.append(_ShotModel(rows, cmaps, data))
            continue
        ky, kx = np.meshgrid(ky_all[rows], kx_all, indexing="ij")
        u = kx.ravel() / W
        v = ky.ravel() / H
        t = np.deg2rad(th)
        up = np.cos(t) * u + np.sin(t) * v
        vp = -np.sin(t) * u + np.cos(t) * v
        pts = np.stack([up * W, vp * H], axis=1)
        keep = (np.abs(pts[:, 0]) <= W / 2) & (np.abs(pts[:, 1]) <= H / 2)
        pts = pts[keep]
        vals = data.reshape(data.shape[0], -1)[:, keep]
        op = GriddedNUFFT(pts, (H, W)) if nufft == "gridded" else None
        models.append(_ShotModel(rows, cmaps, vals, pts, keep, op))
    return models


def _mb_forward(models, x):
    out = []
    for sm in models:
        imgs = sm.coils * x
        if sm.points is None:
            out.append(fft2c(imgs)[:, sm.rows, :])
        elif sm.op is not None:
            out.append(sm.op.forward(imgs))
        else:
            out.append(nudft(sm.points, imgs))
    return out


def _mb_adjoint(models, parts, shape):
    x = np.zeros(shape, dtype=np.complex128)
    for sm, part in zip(models, parts):
        if sm.points is None:
            z = np.zeros(sm.coils.shape, dtype=np.complex128)
            z[:, sm.rows, :] = part
            imgs = ifft2c(z)
        elif sm.op is not None:
            imgs = sm.op.adjoint(part)
        else:
            imgs = nudft_adjoint(sm.points, part, shape)
        x += np.sum(sm.coils.conj() * imgs, axis=0)
    return x


def model_based_gt(
    y,
    coils,
    pattern: ShotPattern,
    m_true: MotionParams,
    lam: float | None = None,
    iters: int = DEFAULT_MB_ITERS,
    tol: float = DEFAULT_MB_TOL,
    *,
    operator: str = "image",
    nufft: str = "direct",
    return_complex: bool = False,
):
    """Known-motion reconstruction of the reference-pose image, RSS combined.

    The image is solved in the frame in which ``m_true`` is expressed and then
    carried to the pose of the shot owning the DC line, through the same
    resampling path the acquisition model uses.

    Parameters
    ----------
    operator : {"image", "nufft"}
        ``"image"`` inverts the acquisition model itself: conjugate phase ramps
        for translations and the transpose of the bilinear rotation.
        ``"nufft"`` removes translations by conjugate phase ramps, rotates each
        shot's k-space coordinates by ``-theta`` and inverts a non-uniform DFT
        with coil maps carried into the object frame.
    nufft : {"direct", "gridded"}
        Transform used by ``operator="nufft"``.
    """
    if operator not in ("image", "nufft"):
        raise ParameterError(f"unknown operator {operator!r}")
    if nufft not in ("direct", "gridded"):
        raise ParameterError(f"unknown nufft mode {nufft!r}")
    y = check_kspace(y)
    coils = check_coils(coils, y.shape[-2:])
    check_motion(m_true, pattern)
    if operator == "image":
        res = cg_lsq(y, coils, pattern, m_true, lam, iters, tol)
    else:
        res = _nufft_lsq(y, coils, pattern, m_true, lam, iters, tol, nufft)
    ref = tuple(float(v) for v in m_true.triples[pattern.dc_shot - 1])
    x = apply_rigid_motion(res.x, ref, m_true.pixel_spacing)
    img = rss(coils * x)
    if return_complex:
        return img, res._replace(x=x)
    return img


def _nufft_lsq(y, coils, pattern, m, lam, iters, tol, nufft):
    shape = y.shape[-2:]
    models = model_based_samples(y * pattern.row_mask()[None, :, None], coils, pattern, m, nufft=nufft)
    data = [sm.data for sm in models]
    splits = np.cumsum([d.size for d in data])[:-1]

    def unpack(vec):
        return [p.reshape(d.shape) for p, d in zip(np.split(vec, splits), data)]

    def apply_a(x):
        return np.concatenate([p.ravel() for p in _mb_forward(models, x)])

    def apply_ah(vec):
        return _mb_adjoint(models, unpack(vec), shape)

    yvec = np.concatenate([d.ravel() for d in data])
    if lam is None:
        lam = default_lambda(apply_ah(yvec))
    return cgls(apply_a, apply_ah, yvec, lam, np.zeros(shape, np.complex128), iters, tol)
