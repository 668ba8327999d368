"""Motion-parameterized multi-coil acquisition operator.

For coil ``i`` the acquisition is ``A_i(m) = sum_s U_s F C_i M_s(m)``: each
shot ``s`` sees the object moved by its own rigid transform ``M_s``, weighted
by the coil map, Fourier transformed and restricted to the rows the shot
acquires.

Rigid motion convention
-----------------------
A triple ``(dh, dv, theta)`` holds a horizontal (column axis) and vertical
(row axis) translation in millimetres and an in-plane rotation in degrees.
The image is first rotated about pixel ``(H // 2, W // 2)`` (the FFT origin)
and then translated. With ``x = col - W // 2`` and ``y = row - H // 2`` the
rotated image samples the input at ``(cos t x + sin t y, -sin t x + cos t y)``.
Rotation uses bilinear interpolation with zeros outside the field of view;
translation is an exact k-space linear phase ramp (circular).
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp

from .exceptions import ConfigurationError, DimensionError, ParameterError
from .numerics import fft2c, fft2c_rows, ifft2c, ifft2c_rows
from .validation import check_coils, check_image, check_kspace

DEFAULT_FOV_MM = 260.0
DC_SHOT = 2  # 1-based index of the shot that owns the central k-space line


# ---------------------------------------------------------------------------
# Shot patterns
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShotPattern:
    """Assignment of acquired phase-encode rows to shots (1-based)."""

    H: int
    S: int
    R: int
    acs: int
    rows: tuple  # ((row, shot), ...) sorted by row

    def __post_init__(self):
        seen = set()
        for r, s in self.rows:
            if not 0 <= r < self.H:
                raise ConfigurationError(f"row {r} outside [0, {self.H})")
            if not 1 <= s <= self.S:
                raise ConfigurationError(f"shot {s} outside [1, {self.S}]")
            if r in seen:
                raise ConfigurationError(f"row {r} assigned twice")
            seen.add(r)
        owned = {s for _, s in self.rows}
        if owned != set(range(1, self.S + 1)):
            raise ConfigurationError("every shot must own at least one row")

    @property
    def center_row(self) -> int:
        return self.H // 2

    def shot_rows(self, s: int) -> np.ndarray:
        return np.array([r for r, sh in self.rows if sh == s], dtype=np.intp)

    @property
    def acquired_rows(self) -> np.ndarray:
        return np.array([r for r, _ in self.rows], dtype=np.intp)

    @property
    def shot_of_row(self) -> dict:
        return dict(self.rows)

    @property
    def dc_shot(self) -> int:
        return self.shot_of_row[self.center_row]

    def shot_masks(self) -> np.ndarray:
        """Boolean ``(S, H)`` row masks ``U_s``."""
        masks = np.zeros((self.S, self.H), dtype=bool)
        for r, s in self.rows:
            masks[s - 1, r] = True
        return masks

    def row_mask(self) -> np.ndarray:
        return self.shot_masks().any(axis=0)

    def to_json(self) -> dict:
        return {
            "H": self.H,
            "S": self.S,
            "R": self.R,
            "acs": self.acs,
            "rows": [[int(r), int(s)] for r, s in self.rows],
        }

    @classmethod
    def from_json(cls, obj) -> "ShotPattern":
        if isinstance(obj, str):
            obj = json.loads(obj)
        rows = tuple(sorted((int(r), int(s)) for r, s in obj["rows"]))
        return cls(int(obj["H"]), int(obj["S"]), int(obj["R"]), int(obj["acs"]), rows)


def acs_rows(H: int, acs: int) -> np.ndarray:
    c = H // 2
    start = c - acs // 2
    return np.arange(start, start + acs, dtype=np.intp)


def make_shot_pattern(H: int, S: int = 6, R: int = 3, acs: int = 8) -> ShotPattern:
    """Build the default interleaved multi-shot pattern.

    Acquired rows are every ``R``-th row through the DC row plus a contiguous
    ACS block. Rows are ranked by ``|k_y|``: the lowest block goes to shot 2,
    the middle rows are dealt round-robin to shots 1, 3, ..., S-2 and the
    outermost rows are split between the last two shots, so shot 2 carries
    most of the spectral energy and the last two shots very little.
    """
    if S < 2:
        raise ConfigurationError(f"need at least 2 shots, got {S}")
    if R < 1:
        raise ConfigurationError(f"acceleration must be >= 1, got {R}")
    if acs < 0 or acs > H:
        raise ConfigurationError(f"acs must be in [0, {H}], got {acs}")
    c = H // 2
    acquired = {r for r in range(H) if (r - c) % R == 0}
    acquired.update(int(r) for r in acs_rows(H, acs))
    ranked = sorted(acquired, key=lambda r: (abs(r - c), r))
    n = len(ranked)
    if n < S:
        raise ConfigurationError(f"{n} acquired rows cannot fill {S} shots")

    if S == 2:
        middle, periphery = [1], []
    elif S < 5:
        middle, periphery = [1] + list(range(3, S + 1)), []
    else:
        middle, periphery = [1] + list(range(3, S - 1)), [S - 1, S]

    base, extra = divmod(n, S)
    counts = {s: base for s in range(1, S + 1)}
    for s in (middle + periphery)[:extra]:
        counts[s] += 1

    assign = {}
    pos = 0
    for r in ranked[pos:pos + counts[DC_SHOT]]:
        assign[r] = DC_SHOT
    pos += counts[DC_SHOT]

    n_mid = sum(counts[s] for s in middle)
    left = dict((s, counts[s]) for s in middle)
    cycle = 0
    for r in ranked[pos:pos + n_mid]:
        while left[middle[cycle % len(middle)]] == 0:
            cycle += 1
        s = middle[cycle % len(middle)]
        assign[r] = s
        left[s] -= 1
        cycle += 1
    pos += n_mid

    for s in periphery:
        for r in ranked[pos:pos + counts[s]]:
            assign[r] = s
        pos += counts[s]

    return ShotPattern(H, S, R, acs, tuple(sorted(assign.items())))


# ---------------------------------------------------------------------------
# Motion parameters
# ---------------------------------------------------------------------------


@dataclass
class MotionParams:
    """Per-shot rigid parameters ``(dh_mm, dv_mm, theta_deg)``."""

    triples: np.ndarray
    pixel_spacing: float = DEFAULT_FOV_MM / 64

    def __post_init__(self):
        t = np.array(self.triples, dtype=np.float64)
        if t.ndim != 2 or t.shape[1] != 3:
            raise DimensionError(f"motion triples must be (S, 3), got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ParameterError("motion parameters must be finite")
        if self.pixel_spacing <= 0:
            raise ParameterError("pixel spacing must be positive")
        self.triples = t

    @classmethod
    def zeros(cls, S: int, pixel_spacing: float = DEFAULT_FOV_MM / 64) -> "MotionParams":
        return cls(np.zeros((S, 3)), pixel_spacing)

    @classmethod
    def from_vector(cls, v, pixel_spacing: float = DEFAULT_FOV_MM / 64) -> "MotionParams":
        return cls(np.asarray(v, dtype=np.float64).reshape(-1, 3), pixel_spacing)

    @property
    def S(self) -> int:
        return self.triples.shape[0]

    def as_vector(self) -> np.ndarray:
        return self.triples.reshape(-1).copy()

    def copy(self) -> "MotionParams":
        return MotionParams(self.triples.copy(), self.pixel_spacing)

    def relative_to(self, shot: int = DC_SHOT) -> "MotionParams":
        """Express every shot's pose relative to ``shot`` (1-based).

        If ``M_s = M(rel_s) M(m_shot)``, the data are generated by ``rel``
        acting on the image as seen during ``shot``.
        """
        ref = self.triples[shot - 1]
        th_ref = np.deg2rad(ref[2])
        out = np.empty_like(self.triples)
        for k, (dh, dv, th) in enumerate(self.triples):
            dth = np.deg2rad(th) - th_ref
            c, s = np.cos(dth), np.sin(dth)
            # t_rel = t_s - R(dth) t_ref, rotation acting on (x, y) = (dh, dv)
            rx = c * ref[0] - s * ref[1]
            ry = s * ref[0] + c * ref[1]
            out[k] = (dh - rx, dv - ry, np.rad2deg(dth))
        out[shot - 1] = 0.0
        return MotionParams(out, self.pixel_spacing)

    def to_json(self) -> list:
        return [[float(a) for a in t] for t in self.triples]


def check_motion(m: MotionParams, pattern: ShotPattern) -> MotionParams:
    if not isinstance(m, MotionParams):
        raise TypeError(f"expected MotionParams, got {type(m).__name__}")
    if m.S != pattern.S:
        raise DimensionError(f"motion has {m.S} shots, pattern has {pattern.S}")
    return m


# ---------------------------------------------------------------------------
# Rigid motion operator
# ---------------------------------------------------------------------------


def _snap(v):
    r = np.round(v)
    return np.where(np.abs(v - r) < 1e-9, r, v)


@lru_cache(maxsize=256)
def rotation_matrix(H: int, W: int, theta_deg: float) -> sp.csr_matrix:
    """Sparse bilinear resampling matrix for a rotation by ``theta_deg``."""
    th = np.deg2rad(theta_deg)
    c, s = np.cos(th), np.sin(th)
    cy, cx = H // 2, W // 2
    rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    x = (cc - cx).ravel().astype(np.float64)
    y = (rr - cy).ravel().astype(np.float64)
    xs = _snap(c * x + s * y) + cx
    ys = _snap(-s * x + c * y) + cy
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    out_idx = np.arange(H * W)
    rows, cols, vals = [], [], []
    for dy, dx, w in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        ok = (w != 0) & (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        rows.append(out_idx[ok])
        cols.append((yy * W + xx)[ok])
        vals.append(w[ok])
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(H * W, H * W),
    )
    mat.sum_duplicates()
    return mat


@lru_cache(maxsize=512)
def _phase_ramp(H: int, W: int, tx_px: float, ty_px: float, centered: bool) -> np.ndarray:
    ky = np.arange(H) - H // 2
    kx = np.arange(W) - W // 2
    ramp = np.exp(-2j * np.pi * (ky[:, None] * ty_px / H + kx[None, :] * tx_px / W))
    if not centered:
        ramp = np.fft.ifftshift(ramp)
    ramp.setflags(write=False)
    return ramp


def translation_ramp(shape, dh_mm, dv_mm, pixel_spacing, *, centered=True) -> np.ndarray:
    """k-space phase ramp that shifts an image by ``(dh, dv)`` millimetres.

    ``centered=False`` returns the ramp in unshifted FFT order.
    """
    H, W = shape[-2:]
    return _phase_ramp(
        int(H), int(W), float(dh_mm) / pixel_spacing, float(dv_mm) / pixel_spacing, bool(centered)
    )


def _rotate(img, theta, adjoint=False):
    H, W = img.shape[-2:]
    mat = rotation_matrix(H, W, float(theta))
    if adjoint:
        mat = mat.T
    flat = img.reshape(-1, H * W).T
    out = (mat @ flat).T
    return out.reshape(img.shape)


def _translate(img, dh, dv, spacing, adjoint=False):
    # circular shift, so the centering shifts cancel and can be skipped
    ramp = translation_ramp(img.shape, dh, dv, spacing, centered=False)
    if adjoint:
        ramp = ramp.conj()
    return sfft.ifft2(sfft.fft2(img, norm="ortho") * ramp, norm="ortho")


def _move(img, triple, spacing, adjoint=False):
    dh, dv, th = (float(v) for v in triple)
    out = img
    if not adjoint:
        if th != 0.0:
            out = _rotate(out, th)
        if dh != 0.0 or dv != 0.0:
            out = _translate(out, dh, dv, spacing)
    else:
        if dh != 0.0 or dv != 0.0:
            out = _translate(out, dh, dv, spacing, adjoint=True)
        if th != 0.0:
            out = _rotate(out, th, adjoint=True)
    if out is img:
        out = img.copy()
    return out


def apply_rigid_motion(img, triple, pixel_spacing: float) -> np.ndarray:
    """Rotate ``img`` about its center by ``theta`` then translate it."""
    img = np.asarray(img)
    if img.ndim < 2:
        raise DimensionError(f"expected an image, got shape {img.shape}")
    if len(triple) != 3:
        raise DimensionError("motion triple must have 3 entries")
    if abs(float(triple[2])) > 90.0:
        raise ParameterError(f"|theta| must be <= 90 degrees, got {triple[2]}")
    if pixel_spacing <= 0:
        raise ParameterError("pixel spacing must be positive")
    return _move(img.astype(np.complex128, copy=False), triple, pixel_spacing)


def apply_rigid_motion_adjoint(img, triple, pixel_spacing: float) -> np.ndarray:
    """Adjoint of :func:`apply_rigid_motion` (transposed bilinear scatter)."""
    img = np.asarray(img).astype(np.complex128, copy=False)
    return _move(img, triple, pixel_spacing, adjoint=True)


# ---------------------------------------------------------------------------
# Acquisition operator
# ---------------------------------------------------------------------------


def _shot_groups(m: MotionParams, pattern: ShotPattern):
    """Group shots sharing an identical pose so each pose is simulated once."""
    groups = {}
    for s in range(1, pattern.S + 1):
        key = tuple(float(v) for v in m.triples[s - 1])
        groups.setdefault(key, []).extend(pattern.shot_rows(s).tolist())
    return [(key, np.array(sorted(rows), dtype=np.intp)) for key, rows in groups.items()]


def _validate(x, coils, pattern, m):
    x = check_image(x)
    coils = check_coils(coils, x.shape)
    if x.shape[0] != pattern.H:
        raise DimensionError(f"image has {x.shape[0]} rows, pattern expects {pattern.H}")
    check_motion(m, pattern)
    return x, coils


def forward(x, coils, pattern: ShotPattern, m: MotionParams) -> np.ndarray:
    """Noise-free multi-shot k-space ``A(m) x`` of shape ``(C, H, W)``."""
    x, coils = _validate(x, coils, pattern, m)
    out = np.zeros(coils.shape, dtype=np.complex128)
    for key, rows in _shot_groups(m, pattern):
        out[:, rows, :] = fft2c_rows(coils * _move(x, key, m.pixel_spacing), rows)
    return out


def adjoint(y, coils, pattern: ShotPattern, m: MotionParams) -> np.ndarray:
    """``A(m)^H y``: masked inverse FFT, coil combination, inverse motion."""
    y = check_kspace(y)
    coils = check_coils(coils, y.shape[-2:])
    if y.shape != coils.shape:
        raise DimensionError(f"k-space shape {y.shape} does not match coils {coils.shape}")
    check_motion(m, pattern)
    x = np.zeros(y.shape[-2:], dtype=np.complex128)
    for key, rows in _shot_groups(m, pattern):
        img = np.sum(coils.conj() * ifft2c_rows(y[:, rows, :], rows, y.shape[-2]), axis=0)
        x += _move(img, key, m.pixel_spacing, adjoint=True)
    return x


def motion_free_operator(x, coils, pattern: ShotPattern) -> np.ndarray:
    """``U F C_i x`` with the overall undersampling mask and no motion."""
    x = check_image(x)
    coils = check_coils(coils, x.shape)
    k = fft2c(coils * x)
    return k * pattern.row_mask()[None, :, None]


def spectral_energy(y, pattern: ShotPattern | None = None) -> float:
    y = np.asarray(y)
    if pattern is not None:
        y = y[:, pattern.acquired_rows, :]
    return float(np.vdot(y, y).real)


def dc_loss(y, x, coils, pattern: ShotPattern, m: MotionParams) -> float:
    """Squared data-consistency residual over acquired entries."""
    y = check_kspace(y)
    rows = pattern.acquired_rows
    r = y[:, rows, :] - forward(x, coils, pattern, m)[:, rows, :]
    return float(np.vdot(r, r).real)


def shot_losses(y, x, coils, pattern: ShotPattern, m: MotionParams) -> np.ndarray:
    """Per-shot contributions to :func:`dc_loss`."""
    y = check_kspace(y)
    x, coils = _validate(x, coils, pattern, m)
    return np.array(
        [
            _shot_loss(y, x, coils, pattern.shot_rows(s), m.triples[s - 1], m.pixel_spacing)
            for s in range(1, pattern.S + 1)
        ]
    )


def _shot_loss(y, x, coils, rows, triple, spacing):
    r = y[:, rows, :] - fft2c_rows(coils * _move(x, triple, spacing), rows)
    return float(np.vdot(r, r).real)


def dc_grad_m(
    y,
    x,
    coils,
    pattern: ShotPattern,
    m: MotionParams,
    step=(0.01, 0.01),
    *,
    stencil: str = "central",
    shots=None,
    workers: int = 1,
) -> np.ndarray:
    """Finite-difference gradient of :func:`dc_loss` with respect to ``m``.

    ``x`` is held fixed. Returns a ``3S`` vector ordered shot by shot as
    ``(dh, dv, theta)``; ``step`` gives the millimetre and degree step. Only
    the perturbed shot's rows change, so each probe evaluates one shot.
    Entries for shots not listed in ``shots`` are left at zero.
    """
    step_mm, step_deg = (float(v) for v in step)
    if step_mm <= 0 or step_deg <= 0:
        raise ParameterError("finite-difference steps must be positive")
    if stencil not in ("central", "forward"):
        raise ParameterError(f"unknown stencil {stencil!r}")
    y = check_kspace(y)
    x, coils = _validate(x, coils, pattern, m)
    shots = range(1, pattern.S + 1) if shots is None else shots
    steps = np.array([step_mm, step_mm, step_deg])

    jobs = []
    for s in shots:
        rows = pattern.shot_rows(s)
        base = m.triples[s - 1]
        for j in range(3):
            plus = base.copy()
            plus[j] += steps[j]
            if stencil == "central":
                minus = base.copy()
                minus[j] -= steps[j]
                jobs.append((s, j, rows, plus, minus))
            else:
                jobs.append((s, j, rows, plus, None))

    base_losses = {}
    if stencil == "forward":
        for s in shots:
            base_losses[s] = _shot_loss(y, x, coils, pattern.shot_rows(s), m.triples[s - 1], m.pixel_spacing)

    def probe(job):
        s, j, rows, plus, minus = job
        fp = _shot_loss(y, x, coils, rows, plus, m.pixel_spacing)
        if minus is None:
            return (fp - base_losses[s]) / steps[j]
        fm = _shot_loss(y, x, coils, rows, minus, m.pixel_spacing)
        return (fp - fm) / (2 * steps[j])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(probe, jobs))
    else:
        values = [probe(job) for job in jobs]

    grad = np.zeros(3 * pattern.S)
    for (s, j, *_), v in zip(jobs, values):
        grad[3 * (s - 1) + j] = v
    return grad
