"""Test-time motion estimation by descent on the data-consistency loss.

The objective for a candidate ``m`` is ``dc(m) = ||y - A(m) x(m)||^2`` where
``x(m)`` comes from a reconstruction backend: the motion-conditioned network
(``HypernetBackend``) or a least-squares solve with the known acquisition
model (``ModelBasedBackend``). Descent runs on ``dc / ||y||^2``.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .classical import cgls, default_lambda, rss
from .exceptions import OptimizationError, ParameterError
from .forward import (
    MotionParams,
    ShotPattern,
    adjoint,
    check_motion,
    dc_grad_m,
    dc_loss,
    forward,
    spectral_energy,
)
from .network import ReconNetwork, fft2c_t, from_channels, ifft2c_t
from .numerics import STREAM_TRIAL_INIT, RngStream
from .validation import check_coils, check_kspace

DEFAULT_REJECT_THRESHOLD = 0.05
DEFAULT_TRIALS = 4
DEFAULT_ITERS = 200
DEFAULT_INIT_RANGE = (5.0, 5.0)  # mm, degrees
DEFAULT_SCHEDULE = ("cyclic-exp", 1e6, 1e5, 50)
MAX_HALVINGS = 5
DEFAULT_STALL_WINDOW = 25
DEFAULT_STALL_TOL = 1e-3
DEFAULT_DC_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Step-size schedules
# ---------------------------------------------------------------------------


class Schedule:
    """Step size as a function of the iteration index."""

    def __init__(self, kind: str, hi: float, lo: float | None = None, period: int = 1):
        lo = hi if lo is None else lo
        if kind not in ("cyclic-exp", "constant"):
            raise ParameterError(f"unknown schedule {kind!r}")
        if not (hi >= lo > 0):
            raise ParameterError(f"schedule needs hi >= lo > 0, got hi={hi}, lo={lo}")
        if int(period) < 1:
            raise ParameterError("period must be >= 1")
        self.kind, self.hi, self.lo, self.period = kind, float(hi), float(lo), int(period)

    def __call__(self, k: int) -> float:
        if self.kind == "constant" or self.hi == self.lo or self.period == 1:
            return self.hi
        frac = (k % self.period) / (self.period - 1)
        return self.hi * (self.lo / self.hi) ** frac

    def to_json(self) -> dict:
        return {"kind": self.kind, "hi": self.hi, "lo": self.lo, "period": self.period}

    def __repr__(self):
        return f"Schedule({self.kind!r}, {self.hi}, {self.lo}, {self.period})"


def lr_schedule(kind: str, hi: float, lo: float | None = None, period: int = 1) -> Schedule:
    """``cyclic-exp`` decays ``hi -> lo`` exponentially within each period then
    resets; ``constant`` always returns ``hi``."""
    return Schedule(kind, hi, lo, period)


def parse_schedule(text: str) -> Schedule:
    """Parse ``"cyclic-exp:hi,lo,period"`` or ``"constant:value"``."""
    try:
        kind, _, args = text.partition(":")
        vals = [v for v in args.split(",") if v.strip()]
        if kind == "constant":
            (hi,) = vals
            return Schedule("constant", float(hi))
        hi, lo, period = vals
        return Schedule(kind, float(hi), float(lo), int(period))
    except ValueError as exc:
        raise ParameterError(f"cannot parse schedule {text!r}") from exc


# ---------------------------------------------------------------------------
# Reconstruction backends
# ---------------------------------------------------------------------------


class ModelBasedBackend:
    """``x(m)`` by least squares against ``A(m)``, warm-started between calls.

    The motion gradient uses the partial derivative at the solved image; at
    an exact minimizer over ``x`` this equals the total derivative.
    """

    name = "model-based"

    def __init__(self, coils, pattern: ShotPattern, lam: float = 0.0, cg_iters: int = 10, tol: float = 1e-10):
        self.coils = check_coils(coils)
        self.pattern = pattern
        self.lam = lam
        self.cg_iters = int(cg_iters)
        self.tol = tol

    def solve(self, y, m, x0=None):
        if x0 is None:
            x0 = np.zeros(y.shape[-2:], dtype=np.complex128)
        lam = default_lambda(adjoint(y, self.coils, self.pattern, m)) if self.lam is None else self.lam
        res = cgls(
            lambda v: forward(v, self.coils, self.pattern, m),
            lambda r: adjoint(r, self.coils, self.pattern, m),
            y,
            lam,
            x0,
            self.cg_iters,
            self.tol,
        )
        return res.x

    def gradient(self, y, x, m, shots, workers=1):
        return dc_grad_m(y, x, self.coils, self.pattern, m, shots=shots, workers=workers)

    def image(self, y, x, m):
        return rss(self.coils * x)


class HypernetBackend:
    """``x(m)`` from the motion-conditioned network.

    The complex image is the coil combination ``sum_i conj(C_i) ifft(k_i)``
    of the network's k-space output, rotated by the global phase that best
    fits the data (the magnitude-only training loss leaves it free). The
    motion gradient adds the finite-difference partial (image fixed) to the
    network's contribution, ``Re <dL/dx, dx/dm>``, obtained by reverse-mode
    differentiation; the phase is optimal, so it is held fixed there.
    """

    name = "hypernet"

    def __init__(self, network: ReconNetwork, coils, pattern: ShotPattern | None = None):
        self.net = network
        self.coils = check_coils(coils)
        self.pattern = pattern or network.pattern
        self._prepared = {}

    def _prep(self, y):
        key = id(y)
        if key not in self._prepared:
            self._prepared = {key: self.net.prepare(y)}
        return self._prepared[key]

    def solve(self, y, m, x0=None):
        x = self.net.complex_image(y, m, self.coils, prepared=self._prep(y))
        return x * self._phase(y, x, m)

    def _phase(self, y, x, m):
        rows = self.pattern.acquired_rows
        c = np.vdot(forward(x, self.coils, self.pattern, m)[:, rows, :], y[:, rows, :])
        return c / abs(c) if abs(c) > 0 else 1.0

    def _x_t(self, y, m_vec_t):
        chans, scale = self._prep(y)
        scale_vec = np.tile([self.net.max_trans_mm, self.net.max_trans_mm, self.net.max_rot_deg], self.pattern.S)
        m_norm = m_vec_t / torch.as_tensor(scale_vec, dtype=m_vec_t.dtype)
        k = from_channels(self.net.kspace_t(chans, m_norm.to(self.net.torch_dtype))) * scale
        imgs = ifft2c_t(k.to(torch.complex128))
        return torch.sum(torch.as_tensor(self.coils).conj() * imgs, dim=0)

    def gradient(self, y, x, m, shots, workers=1):
        grad = dc_grad_m(y, x, self.coils, self.pattern, m, shots=shots, workers=workers)
        resid = forward(x, self.coils, self.pattern, m) - y
        resid = resid * self.pattern.row_mask()[None, :, None]
        g_x = 2.0 * adjoint(resid, self.coils, self.pattern, m)
        m_t = torch.tensor(m.as_vector(), dtype=torch.float64, requires_grad=True)
        x_t = self._x_t(y, m_t)
        raw = x_t.detach().numpy()
        c = np.vdot(raw, x)
        phase = c / abs(c) if abs(c) > 0 else 1.0
        s = torch.sum(torch.as_tensor(g_x).conj() * (phase * x_t)).real
        s.backward()
        net_grad = m_t.grad.numpy()
        mask = np.zeros(3 * self.pattern.S)
        for sh in shots:
            mask[3 * (sh - 1):3 * sh] = 1.0
        return grad + net_grad * mask

    def image(self, y, x, m):
        return self.net.reconstruct(y, m, prepared=self._prep(y))


def reconstructor_dc(y, m: MotionParams, backend, x0=None):
    """Reconstruction at ``m`` and its data-consistency loss.

    Returns ``(x, dc)`` with ``x`` the complex image in the frame of ``m``.
    """
    y = check_kspace(y)
    check_motion(m, backend.pattern)
    if spectral_energy(y, backend.pattern) == 0.0:
        return np.zeros(y.shape[-2:], dtype=np.complex128), 0.0
    x = backend.solve(y, m, x0)
    return x, dc_loss(y, x, backend.coils, backend.pattern, m)


# ---------------------------------------------------------------------------
# Multi-trial descent
# ---------------------------------------------------------------------------


@dataclass
class TrialResult:
    m_hat: MotionParams
    final_dc_loss: float
    loss_trace: list
    trial_seed: int
    iterations_used: int
    trial: int = 0
    x: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "trial": self.trial,
            "seed": self.trial_seed,
            "final_dc": self.final_dc_loss,
            "iters": self.iterations_used,
            "m_hat": self.m_hat.to_json(),
        }


@dataclass
class CorrectionOutcome:
    best_trial: TrialResult
    x_hat: np.ndarray
    rejected: bool
    dc_fraction: float
    trials: list
    threshold: float = DEFAULT_REJECT_THRESHOLD
    backend: str = ""

    @property
    def m_hat(self) -> MotionParams:
        return self.best_trial.m_hat

    def to_json(self) -> dict:
        return {
            "m_hat": self.m_hat.to_json(),
            "dc_fraction": self.dc_fraction,
            "rejected": self.rejected,
            "threshold": self.threshold,
            "backend": self.backend,
            "best_trial": self.best_trial.trial,
            "trials": [t.to_json() for t in self.trials],
        }


def is_rejected(dc_fraction: float, threshold: float = DEFAULT_REJECT_THRESHOLD) -> bool:
    return bool(dc_fraction > threshold)


def free_shots(pattern: ShotPattern, anchor: int | None) -> list:
    return [s for s in range(1, pattern.S + 1) if s != anchor]


def initial_motion(pattern: ShotPattern, trial: int, seed: int, anchor, init_range=DEFAULT_INIT_RANGE, pixel_spacing=260.0 / 64):
    """Zeros for trial 0, otherwise uniform draws on the free shots."""
    triples = np.zeros((pattern.S, 3))
    if trial > 0:
        gen = RngStream(seed, STREAM_TRIAL_INIT).child(trial).generator()
        lim = np.array([init_range[0], init_range[0], init_range[1]])
        draws = gen.uniform(-lim, lim, size=(pattern.S, 3))
        for s in free_shots(pattern, anchor):
            triples[s - 1] = draws[s - 1]
    return MotionParams(triples, pixel_spacing)


def run_trial(
    y,
    backend,
    m0: MotionParams,
    iters: int,
    schedule: Schedule,
    *,
    anchor=None,
    backtracking: bool = True,
    trial: int = 0,
    seed: int = 0,
    workers: int = 1,
    stall_window: int = DEFAULT_STALL_WINDOW,
    stall_tol: float = DEFAULT_STALL_TOL,
    dc_floor: float = DEFAULT_DC_FLOOR,
    normalize: bool = True,
) -> TrialResult:
    """Gradient descent on ``dc / ||y||^2`` from ``m0``.

    With ``backtracking`` a step that raises the loss is halved up to five
    times and dropped if it still does not help, so the trace is
    non-increasing. The halving factor carries over to later iterations and
    doubles back (up to 1) after each step accepted at the first try, which
    spares most of the rejected probes once the schedule overshoots.

    ``normalize=False`` descends on the raw ``dc`` instead, where step sizes
    must be given at the data's absolute scale.

    The trial stops early once the normalized loss falls below ``dc_floor``
    or improved by less than a ``stall_tol`` fraction over the last
    ``stall_window`` iterations (``stall_window=0`` disables this).
    """
    pattern = backend.pattern
    energy = spectral_energy(y, pattern)
    if energy == 0.0:
        return TrialResult(m0.copy(), 0.0, [0.0], seed, 0, trial, np.zeros(y.shape[-2:], np.complex128))
    shots = free_shots(pattern, anchor)
    free = np.zeros(3 * pattern.S, dtype=bool)
    for s in shots:
        free[3 * (s - 1):3 * s] = True
    m = m0.copy()
    x, dc = reconstructor_dc(y, m, backend)
    trace = [dc]
    used = 0
    factor = 1.0
    for k in range(iters):
        if not math.isfinite(dc) or dc / energy < dc_floor:
            break
        if stall_window and k >= stall_window and dc > (1.0 - stall_tol) * trace[-1 - stall_window]:
            break
        g = backend.gradient(y, x, m, shots, workers)
        if normalize:
            g = g / energy
        g[~free] = 0.0
        if not np.all(np.isfinite(g)):
            break
        step = schedule(k) * factor
        v = m.as_vector()
        accepted = False
        for tries in range(MAX_HALVINGS + 1 if backtracking else 1):
            cand_v = v - step * g
            cand_v[2::3] = np.clip(cand_v[2::3], -89.0, 89.0)
            cand = MotionParams.from_vector(cand_v, m.pixel_spacing)
            cx, cdc = reconstructor_dc(y, cand, backend, x0=x)
            if not backtracking or (math.isfinite(cdc) and cdc <= dc):
                accepted = True
                break
            step *= 0.5
            factor *= 0.5
        if backtracking and accepted and tries == 0:
            factor = min(1.0, 2.0 * factor)
        used = k + 1
        if accepted:
            m, x, dc = cand, cx, cdc
        trace.append(dc)
    return TrialResult(m, float(dc), [float(v) for v in trace], int(seed), used, trial, x)


def estimate_motion(
    y,
    backend,
    trials: int = DEFAULT_TRIALS,
    iters: int = DEFAULT_ITERS,
    schedule: Schedule | None = None,
    *,
    seed: int = 0,
    reject_threshold: float = DEFAULT_REJECT_THRESHOLD,
    init_range=DEFAULT_INIT_RANGE,
    anchor: int | None = None,
    backtracking: bool = True,
    pixel_spacing: float = 260.0 / 64,
    workers: int = 1,
    stall_window: int = DEFAULT_STALL_WINDOW,
    normalize: bool = True,
) -> CorrectionOutcome:
    """Multi-trial motion search; best trial by final loss, lowest index on ties.

    ``anchor`` (default: the DC-owning shot) is held at zero motion, fixing
    the frame of the reconstruction to the reference pose.
    """
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    if iters < 0:
        raise ParameterError("iters must be >= 0")
    y = check_kspace(y)
    pattern = backend.pattern
    anchor = pattern.dc_shot if anchor is None else anchor
    schedule = schedule or Schedule(*DEFAULT_SCHEDULE)

    def job(t):
        m0 = initial_motion(pattern, t, seed, anchor, init_range, pixel_spacing)
        return run_trial(
            y, backend, m0, iters, schedule, anchor=anchor, backtracking=backtracking, trial=t, seed=seed,
            stall_window=stall_window, normalize=normalize,
        )

    if workers > 1 and trials > 1:
        with ThreadPoolExecutor(max_workers=min(workers, trials)) as pool:
            results = list(pool.map(job, range(trials)))
    else:
        results = [job(t) for t in range(trials)]
    finite = [r for r in results if math.isfinite(r.final_dc_loss)]
    if not finite:
        raise OptimizationError("every trial produced a non-finite loss")
    best = min(finite, key=lambda r: (r.final_dc_loss, r.trial))
    energy = spectral_energy(y, pattern)
    frac = best.final_dc_loss / energy if energy > 0 else 0.0
    x_hat = backend.image(y, best.x, best.m_hat)
    return CorrectionOutcome(best, x_hat, is_rejected(frac, reject_threshold), float(frac), results, reject_threshold, backend.name)


def hn_gt_eval(y, m_true: MotionParams, network: ReconNetwork, prepared=None) -> np.ndarray:
    """Network reconstruction at the true motion, expressed relative to the
    reference pose; no optimization."""
    return network.reconstruct(y, m_true, prepared=prepared)


# ---------------------------------------------------------------------------
# Alternating baseline
# ---------------------------------------------------------------------------


@dataclass
class JointResult:
    x: np.ndarray
    m: MotionParams
    objective_trace: list
    dc_trace: list
    lam: float


def alternating_joint(
    y,
    coils,
    pattern: ShotPattern,
    iters_outer: int = 20,
    cg_iters: int = 30,
    *,
    motion_steps: int = 5,
    schedule: Schedule | None = None,
    lam: float = 0.0,
    m0: MotionParams | None = None,
    anchor: int | None = None,
    pixel_spacing: float = 260.0 / 64,
) -> JointResult:
    """Block coordinate descent on ``||y - A(m) x||^2 + lam ||x||^2``.

    Each outer iteration runs a warm-started CG image step at fixed ``m``
    and then ``motion_steps`` backtracking gradient steps at fixed ``x``.
    ``objective_trace`` holds the shared objective after each outer
    iteration and is non-increasing; ``dc_trace`` holds the data term.
    """
    if iters_outer < 1:
        raise ParameterError("iters_outer must be >= 1")
    y = check_kspace(y)
    coils = check_coils(coils, y.shape[-2:])
    anchor = pattern.dc_shot if anchor is None else anchor
    schedule = schedule or Schedule(*DEFAULT_SCHEDULE)
    energy = spectral_energy(y, pattern) or 1.0
    shots = free_shots(pattern, anchor)
    free = np.zeros(3 * pattern.S, dtype=bool)
    for s in shots:
        free[3 * (s - 1):3 * s] = True
    m = MotionParams.zeros(pattern.S, pixel_spacing) if m0 is None else m0.copy()
    x = np.zeros(y.shape[-2:], dtype=np.complex128)
    obj_trace, dc_trace = [], []
    k = 0
    for _ in range(iters_outer):
        res = cgls(
            lambda v: forward(v, coils, pattern, m),
            lambda r: adjoint(r, coils, pattern, m),
            y * pattern.row_mask()[None, :, None],
            lam,
            x,
            cg_iters,
            1e-12,
        )
        x = res.x
        dc = dc_loss(y, x, coils, pattern, m)
        if not math.isfinite(dc):
            raise OptimizationError(f"non-finite loss; trace so far {obj_trace}")
        for _ in range(motion_steps):
            g = dc_grad_m(y, x, coils, pattern, m, shots=shots) / energy
            g[~free] = 0.0
            step = schedule(k)
            k += 1
            v = m.as_vector()
            for _ in range(MAX_HALVINGS + 1):
                cand = MotionParams.from_vector(v - step * g, m.pixel_spacing)
                cdc = dc_loss(y, x, coils, pattern, cand)
                if math.isfinite(cdc) and cdc <= dc:
                    m, dc = cand, cdc
                    break
                step *= 0.5
        reg = lam * float(np.vdot(x, x).real)
        obj_trace.append(dc + reg)
        dc_trace.append(dc)
    return JointResult(x, m, obj_trace, dc_trace, lam)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def write_outcome(outcome: CorrectionOutcome, json_path, trace_path=None) -> None:
    with open(json_path, "w") as fh:
        json.dump(outcome.to_json(), fh, indent=2, sort_keys=True)
    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "iteration", "dc"])
            for t in outcome.trials:
                for i, v in enumerate(t.loss_trace):
                    w.writerow([t.trial, i, repr(float(v))])
