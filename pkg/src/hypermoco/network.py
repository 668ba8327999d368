"""Motion-conditioned reconstruction network ``f(y, m) = g(y; h(m))``.

``g`` alternates residual convolution blocks in k-space and image space with
centered FFTs between them; it maps the real/imaginary channel stack of the
interpolated k-space to full k-space per coil. ``h`` is a dense network from
normalized motion parameters to the flat weight vector of ``g``.

Weights are flat vectors described by a layout, so the same ``g`` runs with
one weight set (plain network) or one per batch element (hypernetwork).
Gradients come from ``torch.autograd``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .classical import arc_interp, rss_recon
from .exceptions import DimensionError, FormatError, ParameterError
from .forward import MotionParams, ShotPattern
from .mtns import read_tensor, write_tensor
from .numerics import as_generator, ifft2c

DOMAINS = ("k", "i")
RSS_EPS = 1e-20


# ---------------------------------------------------------------------------
# Layouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GLayout:
    """Parameter layout of the reconstruction subnetwork ``g``.

    Each entry of ``domains`` is one residual block ``conv -> act -> conv``
    applied in k-space (``"k"``) or image space (``"i"``).
    """

    coils: int = 4
    features: int = 8
    domains: tuple = ("k", "i")
    kernel: int = 3

    def __post_init__(self):
        if self.coils < 1 or self.features < 1:
            raise ParameterError("coils and features must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ParameterError(f"kernel must be odd, got {self.kernel}")
        if not self.domains or any(d not in DOMAINS for d in self.domains):
            raise ParameterError(f"domains must be a non-empty sequence of {DOMAINS}")
        object.__setattr__(self, "domains", tuple(self.domains))

    @property
    def channels(self) -> int:
        return 2 * self.coils

    @property
    def entries(self) -> list:
        c, f, k = self.channels, self.features, self.kernel
        out = []
        for b, dom in enumerate(self.domains):
            out += [
                (f"{dom}{b}.conv1.weight", (f, c, k, k)),
                (f"{dom}{b}.conv1.bias", (f,)),
                (f"{dom}{b}.conv2.weight", (c, f, k, k)),
                (f"{dom}{b}.conv2.bias", (c,)),
            ]
        return out

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.entries)

    def slices(self) -> dict:
        out, start = {}, 0
        for name, shape in self.entries:
            n = int(np.prod(shape))
            out[name] = (slice(start, start + n), shape)
            start += n
        return out

    def split(self, theta):
        """Named views of ``theta`` shaped ``(P,)`` or ``(B, P)``."""
        if theta.shape[-1] != self.size:
            raise DimensionError(f"weight vector has {theta.shape[-1]} entries, layout needs {self.size}")
        lead = theta.shape[:-1]
        return {name: theta[..., sl].reshape(*lead, *shape) for name, (sl, shape) in self.slices().items()}

    def to_json(self) -> dict:
        return {"coils": self.coils, "features": self.features, "domains": list(self.domains), "kernel": self.kernel}

    @classmethod
    def from_json(cls, obj) -> "GLayout":
        return cls(int(obj["coils"]), int(obj["features"]), tuple(obj["domains"]), int(obj["kernel"]))


@dataclass(frozen=True)
class HLayout:
    """Dense hypernetwork ``3S -> hidden... -> |theta_g|``."""

    n_in: int
    n_out: int
    hidden: tuple = (64, 64, 64)

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1 or any(h < 1 for h in self.hidden):
            raise ParameterError("layer widths must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def widths(self) -> list:
        return [self.n_in, *self.hidden, self.n_out]

    @property
    def entries(self) -> list:
        w = self.widths
        out = []
        for i in range(len(w) - 1):
            name = "out" if i == len(w) - 2 else f"dense{i}"
            out += [(f"{name}.weight", (w[i + 1], w[i])), (f"{name}.bias", (w[i + 1],))]
        return out

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.entries)

    def slices(self) -> dict:
        out, start = {}, 0
        for name, shape in self.entries:
            n = int(np.prod(shape))
            out[name] = (slice(start, start + n), shape)
            start += n
        return out

    def split(self, theta):
        if theta.shape[-1] != self.size:
            raise DimensionError(f"weight vector has {theta.shape[-1]} entries, layout needs {self.size}")
        return {name: theta[sl].reshape(shape) for name, (sl, shape) in self.slices().items()}

    def to_json(self) -> dict:
        return {"n_in": self.n_in, "n_out": self.n_out, "hidden": list(self.hidden)}

    @classmethod
    def from_json(cls, obj) -> "HLayout":
        return cls(int(obj["n_in"]), int(obj["n_out"]), tuple(obj["hidden"]))


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _fan_in_uniform(gen, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return gen.uniform(-bound, bound, size=shape)


def init_g(layout: GLayout, rng) -> np.ndarray:
    """Fan-in uniform first convolutions, zero second convolutions.

    With every block's output convolution at zero the residual blocks vanish,
    so ``g`` starts as the identity.
    """
    gen = as_generator(rng)
    theta = np.zeros(layout.size)
    k2 = layout.kernel**2
    for name, (sl, shape) in layout.slices().items():
        if ".conv1." in name:
            theta[sl] = _fan_in_uniform(gen, shape, layout.channels * k2).ravel()
    return theta


def init_h(hlayout: HLayout, glayout: GLayout, rng, final_scale: float = 1e-3) -> np.ndarray:
    """Fan-in uniform dense layers; near-zero final projection.

    Rows of the final layer that emit ``g``'s first-convolution parameters are
    fan-in draws scaled by ``final_scale``, with the bias carrying an ordinary
    fan-in draw so the first convolutions start at a usable scale. Rows that
    emit the second-convolution parameters are exactly zero, which makes
    ``f(y, m)`` equal to the identity for every ``m`` before training.
    """
    if hlayout.n_out != glayout.size:
        raise DimensionError(f"hypernetwork emits {hlayout.n_out} values, subnetwork needs {glayout.size}")
    gen = as_generator(rng)
    theta = np.zeros(hlayout.size)
    sl = hlayout.slices()
    w = hlayout.widths
    for i in range(len(w) - 2):
        ws, wshape = sl[f"dense{i}.weight"]
        bs, bshape = sl[f"dense{i}.bias"]
        theta[ws] = _fan_in_uniform(gen, wshape, w[i]).ravel()
        theta[bs] = _fan_in_uniform(gen, bshape, w[i]).ravel()
    ws, wshape = sl["out.weight"]
    bs, _ = sl["out.bias"]
    W = np.zeros(wshape)
    b = np.zeros(wshape[0])
    g_init = init_g(glayout, gen)
    for name, (gsl, shape) in glayout.slices().items():
        if ".conv1." in name:
            rows = np.arange(gsl.start, gsl.stop)
            W[rows] = final_scale * _fan_in_uniform(gen, (rows.size, w[-2]), w[-2])
            b[rows] = g_init[gsl]
    theta[ws] = W.ravel()
    theta[bs] = b
    return theta


# ---------------------------------------------------------------------------
# Differentiable building blocks
# ---------------------------------------------------------------------------


def to_channels(k: torch.Tensor) -> torch.Tensor:
    """Complex ``(..., C, H, W)`` to real ``(..., 2C, H, W)`` (real planes first)."""
    return torch.cat([k.real, k.imag], dim=-3)


def from_channels(z: torch.Tensor) -> torch.Tensor:
    C = z.shape[-3] // 2
    return torch.complex(z[..., :C, :, :], z[..., C:, :, :])


def fft2c_t(x: torch.Tensor) -> torch.Tensor:
    x = torch.fft.ifftshift(x, dim=(-2, -1))
    return torch.fft.fftshift(torch.fft.fft2(x, norm="ortho"), dim=(-2, -1))


def ifft2c_t(k: torch.Tensor) -> torch.Tensor:
    k = torch.fft.ifftshift(k, dim=(-2, -1))
    return torch.fft.fftshift(torch.fft.ifft2(k, norm="ortho"), dim=(-2, -1))


def kspace_to_image_channels(z: torch.Tensor) -> torch.Tensor:
    return to_channels(ifft2c_t(from_channels(z)))


def image_to_kspace_channels(z: torch.Tensor) -> torch.Tensor:
    return to_channels(fft2c_t(from_channels(z)))


def activation(z: torch.Tensor) -> torch.Tensor:
    return F.elu(z)


def conv2d(z: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Same-padded convolution; per-sample weights when ``weight`` is 5D."""
    if weight.dim() == 4:
        return F.conv2d(z, weight, bias, padding=weight.shape[-1] // 2)
    B, cin, H, W = z.shape
    cout = weight.shape[1]
    out = F.conv2d(
        z.reshape(1, B * cin, H, W),
        weight.reshape(B * cout, *weight.shape[2:]),
        bias.reshape(B * cout),
        padding=weight.shape[-1] // 2,
        groups=B,
    )
    return out.reshape(B, cout, H, W)


def dense(z: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    return z @ weight.T + bias


def g_forward(k_in: torch.Tensor, theta_g: torch.Tensor, layout: GLayout) -> torch.Tensor:
    """Apply ``g`` to k-space channels ``(B, 2C, H, W)``.

    ``theta_g`` is ``(P,)`` for shared weights or ``(B, P)`` for one weight
    vector per batch element. Returns full k-space channels of the same shape.
    """
    if k_in.dim() != 4 or k_in.shape[1] != layout.channels:
        raise DimensionError(f"expected (B, {layout.channels}, H, W) input, got {tuple(k_in.shape)}")
    if theta_g.dim() == 2 and theta_g.shape[0] != k_in.shape[0]:
        raise DimensionError("one weight vector per batch element is required")
    p = layout.split(theta_g)
    z = k_in
    domain = "k"
    for b, dom in enumerate(layout.domains):
        if dom != domain:
            z = kspace_to_image_channels(z) if dom == "i" else image_to_kspace_channels(z)
            domain = dom
        pre = f"{dom}{b}"
        r = activation(conv2d(z, p[f"{pre}.conv1.weight"], p[f"{pre}.conv1.bias"]))
        z = z + conv2d(r, p[f"{pre}.conv2.weight"], p[f"{pre}.conv2.bias"])
    if domain == "i":
        z = image_to_kspace_channels(z)
    return z


def h_forward(m_norm: torch.Tensor, theta_h: torch.Tensor, hlayout: HLayout) -> torch.Tensor:
    """Map normalized motion ``(B, 3S)`` to subnetwork weights ``(B, |theta_g|)``."""
    if m_norm.shape[-1] != hlayout.n_in:
        raise DimensionError(f"expected {hlayout.n_in} motion scalars, got {m_norm.shape[-1]}")
    p = hlayout.split(theta_h)
    z = m_norm
    for i in range(len(hlayout.hidden)):
        z = activation(dense(z, p[f"dense{i}.weight"], p[f"dense{i}.bias"]))
    return dense(z, p["out.weight"], p["out.bias"])


def rss_t(k_chan: torch.Tensor) -> torch.Tensor:
    """Root-sum-of-squares image of k-space channels ``(..., 2C, H, W)``."""
    img = ifft2c_t(from_channels(k_chan))
    # tiny offset keeps the square-root gradient finite at exact zeros
    return torch.sqrt(torch.sum(img.real**2 + img.imag**2, dim=-3) + RSS_EPS)


def normalize_motion(m_vec, max_trans_mm: float = 10.0, max_rot_deg: float = 10.0):
    """Scale a ``(..., 3S)`` motion vector to ``[-1, 1]`` by the sampling ranges."""
    scale = np.tile([max_trans_mm, max_trans_mm, max_rot_deg], np.shape(m_vec)[-1] // 3)
    if torch.is_tensor(m_vec):
        return m_vec / torch.as_tensor(scale, dtype=m_vec.dtype)
    return np.asarray(m_vec, dtype=np.float64) / scale


# ---------------------------------------------------------------------------
# Bundled model
# ---------------------------------------------------------------------------

MODES = ("hypernet", "conv")


@dataclass
class ReconNetwork:
    """Weights plus everything needed to run ``f(y, m)`` on a record.

    Parameters
    ----------
    mode : {"hypernet", "conv"}
        ``"hypernet"`` holds ``theta_h``; ``"conv"`` holds ``theta_g`` and
        ignores ``m``.
    theta : ndarray
        Flat weight vector for the active mode.
    """

    glayout: GLayout
    hlayout: HLayout | None
    mode: str
    theta: np.ndarray
    pattern: ShotPattern
    arc_kernel: tuple = (2, 3)
    arc_ridge: float = 1e-4
    max_trans_mm: float = 10.0
    max_rot_deg: float = 10.0
    dtype: str = "float32"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "hypernet" and self.hlayout is None:
            raise ParameterError("hypernet mode needs an HLayout")
        self.theta = np.asarray(self.theta, dtype=np.float64).ravel()
        expected = self.hlayout.size if self.mode == "hypernet" else self.glayout.size
        if self.theta.size != expected:
            raise DimensionError(f"weight vector has {self.theta.size} entries, layout needs {expected}")

    @classmethod
    def create(
        cls,
        pattern: ShotPattern,
        coils: int,
        mode: str = "hypernet",
        *,
        features: int = 8,
        domains=("k", "i"),
        kernel: int = 3,
        hidden=(64, 64, 64),
        rng=None,
        **kwargs,
    ) -> "ReconNetwork":
        if mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
        glayout = GLayout(coils, features, tuple(domains), kernel)
        hlayout = HLayout(3 * pattern.S, glayout.size, tuple(hidden))
        gen = as_generator(rng)
        theta = init_h(hlayout, glayout, gen) if mode == "hypernet" else init_g(glayout, gen)
        return cls(glayout, hlayout, mode, theta, pattern, **kwargs)

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    # -- input preparation -------------------------------------------------

    def prepare(self, y):
        """Interpolated k-space channels ``(2C, H, W)`` and their scale."""
        k = arc_interp(y, self.pattern, self.arc_kernel, self.arc_ridge)
        scale = float(rss_recon(k).max())
        scale = scale if scale > 0 else 1.0
        chans = np.concatenate([k.real, k.imag], axis=0) / scale
        return chans, scale

    def motion_input(self, m) -> np.ndarray:
        vec = m.as_vector() if isinstance(m, MotionParams) else np.asarray(m, dtype=np.float64).ravel()
        if vec.size != 3 * self.pattern.S:
            raise DimensionError(f"expected {3 * self.pattern.S} motion scalars, got {vec.size}")
        return normalize_motion(vec, self.max_trans_mm, self.max_rot_deg)

    # -- differentiable core -------------------------------------------------

    def weights_t(self, theta=None, m_norm=None):
        """Subnetwork weights as a tensor: ``(P,)`` or ``(B, P)``."""
        theta = torch.as_tensor(self.theta if theta is None else theta, dtype=self.torch_dtype)
        if self.mode == "conv":
            return theta
        return h_forward(m_norm, theta, self.hlayout)

    def kspace_t(self, chans, m_norm, theta=None):
        """Output k-space channels for batched inputs (normalized scale)."""
        chans = torch.as_tensor(chans, dtype=self.torch_dtype)
        single = chans.dim() == 3
        if single:
            chans = chans[None]
        if self.mode == "hypernet":
            m_norm = torch.as_tensor(m_norm, dtype=self.torch_dtype)
            if m_norm.dim() == 1:
                m_norm = m_norm[None]
        out = g_forward(chans, self.weights_t(theta, m_norm), self.glayout)
        return out[0] if single else out

    # -- numpy-facing inference ---------------------------------------------

    def kspace(self, y, m, prepared=None) -> np.ndarray:
        """Full complex k-space ``(C, H, W)`` at the data scale."""
        chans, scale = self.prepare(y) if prepared is None else prepared
        with torch.no_grad():
            out = self.kspace_t(chans, self.motion_input(m)).double().numpy()
        C = self.glayout.coils
        return (out[:C] + 1j * out[C:]) * scale

    def reconstruct(self, y, m, prepared=None) -> np.ndarray:
        """RSS magnitude image ``f(y, m)``."""
        return rss_recon(self.kspace(y, m, prepared))

    def complex_image(self, y, m, coils, prepared=None) -> np.ndarray:
        """Coil-combined complex image ``sum_i conj(C_i) ifft(k_i)``."""
        return np.sum(np.conj(coils) * ifft2c(self.kspace(y, m, prepared)), axis=0)

    # -- persistence -------------------------------------------------------

    def layout_json(self) -> dict:
        return {
            "format": "hypermoco-weights",
            "version": 1,
            "mode": self.mode,
            "glayout": self.glayout.to_json(),
            "hlayout": None if self.hlayout is None else self.hlayout.to_json(),
            "pattern": self.pattern.to_json(),
            "arc_kernel": list(self.arc_kernel),
            "arc_ridge": self.arc_ridge,
            "max_trans_mm": self.max_trans_mm,
            "max_rot_deg": self.max_rot_deg,
            "dtype": self.dtype,
            "n_params": int(self.theta.size),
            "meta": self.meta,
        }

    def save(self, directory) -> None:
        """Write ``weights.mtns`` (float32) and ``layout.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(d / "weights.mtns", self.theta.astype(np.float32))
        (d / "layout.json").write_text(json.dumps(self.layout_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "ReconNetwork":
        d = Path(directory)
        try:
            meta = json.loads((d / "layout.json").read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid layout.json: {exc}") from exc
        if meta.get("format") != "hypermoco-weights":
            raise FormatError("layout.json is not a hypermoco weight descriptor")
        theta = read_tensor(d / "weights.mtns").astype(np.float64)
        glayout = GLayout.from_json(meta["glayout"])
        hlayout = None if meta["hlayout"] is None else HLayout.from_json(meta["hlayout"])
        return cls(
            glayout,
            hlayout,
            meta["mode"],
            theta,
            ShotPattern.from_json(meta["pattern"]),
            tuple(meta["arc_kernel"]),
            float(meta["arc_ridge"]),
            float(meta["max_trans_mm"]),
            float(meta["max_rot_deg"]),
            meta.get("dtype", "float32"),
            meta.get("meta", {}),
        )
