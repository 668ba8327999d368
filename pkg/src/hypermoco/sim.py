"""Phantoms, synthetic coil maps, random motion and corrupted k-space."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .exceptions import DimensionError, ParameterError
from .forward import (
    DC_SHOT,
    MotionParams,
    ShotPattern,
    apply_rigid_motion,
    check_motion,
)
from .mtns import read_tensor, write_tensor
from .numerics import (
    STREAM_COILS,
    STREAM_MOTION,
    STREAM_NOISE,
    STREAM_PHANTOM,
    RngStream,
    as_generator,
    complex_gaussian,
    fft2c_rows,
)
from .validation import check_coils, check_image, check_kspace

PHANTOM_MARGIN = 12
# Band limit: hard ellipse edges put far more energy in the outer k-space rows
# than an acquired anatomical image has.
PHANTOM_BLUR_PX = 0.7

# Modified Shepp-Logan: (intensity, a, b, x0, y0, phi_deg)
_SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


def _unit_grid(H, W, margin):
    """Coordinates in [-1, 1] spanning the interior box inside ``margin``."""
    ys = (np.arange(H) - (H - 1) / 2) / ((H - 1) / 2 - margin)
    xs = (np.arange(W) - (W - 1) / 2) / ((W - 1) / 2 - margin)
    return np.meshgrid(ys, xs, indexing="ij")


def _draw_ellipses(Y, X, ellipses):
    img = np.zeros_like(X)
    for val, a, b, x0, y0, phi in ellipses:
        t = np.deg2rad(phi)
        xr = (X - x0) * np.cos(t) + (Y - y0) * np.sin(t)
        yr = -(X - x0) * np.sin(t) + (Y - y0) * np.cos(t)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    return img


def _random_ellipses(gen):
    ells = [(gen.uniform(0.6, 1.0), gen.uniform(0.75, 0.95), gen.uniform(0.8, 0.98), 0.0, 0.0, gen.uniform(-15, 15))]
    for _ in range(gen.integers(5, 11)):
        a = gen.uniform(0.05, 0.35)
        b = gen.uniform(0.05, 0.35)
        r = gen.uniform(0.0, 0.55)
        ang = gen.uniform(0, 2 * np.pi)
        ells.append((gen.uniform(-0.5, 0.5), a, b, r * np.cos(ang), r * np.sin(ang), gen.uniform(0, 180)))
    return ells


def _smooth_phase(gen, Y, X, max_rad=np.pi / 4):
    coef = gen.uniform(-1.0, 1.0, size=6)
    terms = np.stack([np.ones_like(X), X, Y, X * X, X * Y, Y * Y])
    phase = np.tensordot(coef, terms, axes=1)
    return max_rad * phase / max(np.abs(phase).max(), 1e-12)


def make_phantom(rng, H: int, W: int, kind: str = "shepp-logan") -> np.ndarray:
    """Complex phantom with magnitude in [0, 1] and a smooth random phase.

    The object sits inside a zero border of at least 12 pixels so rigid motion
    up to 10 mm / 10 degrees keeps it in the field of view.
    """
    if H < 32 or W < 32:
        raise ParameterError(f"phantom must be at least 32x32, got {H}x{W}")
    gen = as_generator(rng)
    Y, X = _unit_grid(H, W, PHANTOM_MARGIN)
    if kind == "shepp-logan":
        ells = _SHEPP_LOGAN
    elif kind == "random-ellipses":
        ells = _random_ellipses(gen)
    else:
        raise ParameterError(f"unknown phantom kind {kind!r}")
    mag = np.clip(_draw_ellipses(Y, -X if kind == "shepp-logan" else X, ells), 0.0, 1.0)
    mag = gaussian_filter(mag, PHANTOM_BLUR_PX)
    border = np.zeros((H, W), dtype=bool)
    border[PHANTOM_MARGIN:H - PHANTOM_MARGIN, PHANTOM_MARGIN:W - PHANTOM_MARGIN] = True
    mag = np.where(border, mag, 0.0)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    return mag * np.exp(1j * _smooth_phase(gen, Y, X))


COIL_RADIUS = 0.5
COIL_WIDTH = 0.55


def synth_coil_profiles(
    rng, H: int, W: int, C: int, *, radius: float = COIL_RADIUS, width: float = COIL_WIDTH
) -> np.ndarray:
    """Smooth complex coil maps around the FOV, normalized to unit RSS.

    Gaussian magnitudes centered ``radius * max(H, W)`` from the image center
    at equispaced angles, with standard deviation ``width * max(H, W)``.
    """
    if C < 1:
        raise ParameterError(f"need at least one coil, got {C}")
    gen = as_generator(rng)
    rr, cc = np.meshgrid(np.arange(H) - H / 2, np.arange(W) - W / 2, indexing="ij")
    if radius < 0 or width <= 0:
        raise ParameterError("coil radius must be >= 0 and width > 0")
    radius = radius * max(H, W)
    width = width * max(H, W)
    start = gen.uniform(0, 2 * np.pi)
    maps = []
    for c in range(C):
        ang = start + 2 * np.pi * c / C
        cy, cx = radius * np.sin(ang), radius * np.cos(ang)
        mag = np.exp(-((rr - cy) ** 2 + (cc - cx) ** 2) / (2 * width**2))
        gy, gx = gen.uniform(-0.5, 0.5, size=2) * np.pi / max(H, W)
        phase = 2 * np.pi * c / C + gy * rr + gx * cc
        maps.append(mag * np.exp(1j * phase))
    maps = np.stack(maps)
    rss = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return maps / rss


def sample_motion(
    rng,
    S: int,
    max_trans_mm: float = 10.0,
    max_rot_deg: float = 10.0,
    *,
    pixel_spacing: float = 260.0 / 64,
    per_shot: bool = False,
    onset: int | None = None,
) -> MotionParams:
    """Single rigid motion event starting at a random shot in ``2..S``.

    Shots before the onset keep ``(0, 0, 0)``; the onset shot and all later
    shots share one triple (or each draw their own when ``per_shot``).
    """
    if S < 2:
        raise ParameterError(f"need at least 2 shots, got {S}")
    gen = as_generator(rng)
    s_star = int(gen.integers(2, S + 1))
    if onset is not None:
        if not 2 <= onset <= S:
            raise ParameterError(f"onset must be in [2, {S}], got {onset}")
        s_star = onset
    triples = np.zeros((S, 3))
    lim = np.array([max_trans_mm, max_trans_mm, max_rot_deg])
    if per_shot:
        triples[s_star - 1:] = gen.uniform(-lim, lim, size=(S - s_star + 1, 3))
    else:
        triples[s_star - 1:] = gen.uniform(-lim, lim)
    return MotionParams(triples, pixel_spacing)


def motion_onset(m: MotionParams) -> int:
    """First shot whose pose differs from shot 1 (``S + 1`` if none)."""
    for s in range(2, m.S + 1):
        if np.any(m.triples[s - 1] != m.triples[0]):
            return s
    return m.S + 1


@dataclass
class SimRecord:
    """One simulated acquisition with its ground truth."""

    x_ref: np.ndarray
    y: np.ndarray
    m_true: MotionParams
    coils: np.ndarray
    pattern: ShotPattern
    noise_sigma: np.ndarray
    seed: int
    noise_frac: float = 0.0
    record_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def s_star(self) -> int:
        return motion_onset(self.m_true)

    @property
    def m_ref(self) -> MotionParams:
        """Ground-truth motion relative to the pose that owns the DC line."""
        return self.m_true.relative_to(self.pattern.dc_shot)


def _positions(x_src, m: MotionParams):
    """Moved copies of ``x_src``, one per distinct pose, all via the motion path."""
    out = {}
    for t in m.triples:
        key = tuple(float(v) for v in t)
        if key not in out:
            out[key] = apply_rigid_motion(x_src, key, m.pixel_spacing)
    return out


def simulate_corrupted(
    x_src,
    coils,
    pattern: ShotPattern,
    m: MotionParams,
    rng,
    noise_frac: float = 0.05,
    *,
    seed: int = 0,
    record_id: str = "",
) -> SimRecord:
    """Mix per-shot k-space of each pose and add calibrated complex noise.

    The per-coil noise level is chosen so the expected noise energy over the
    acquired entries equals ``noise_frac`` times that coil's signal energy.
    """
    x_src = check_image(x_src)
    coils = check_coils(coils, x_src.shape)
    check_motion(m, pattern)
    if noise_frac < 0:
        raise ParameterError("noise_frac must be >= 0")
    poses = _positions(x_src, m)
    y = np.zeros(coils.shape, dtype=np.complex128)
    groups = {}
    for s in range(1, pattern.S + 1):
        key = tuple(float(v) for v in m.triples[s - 1])
        groups.setdefault(key, []).extend(pattern.shot_rows(s).tolist())
    for key, rows in groups.items():
        # same row grouping and transform as forward(), so noiseless data match it bit for bit
        rows = np.array(sorted(rows), dtype=np.intp)
        y[:, rows, :] = fft2c_rows(coils * poses[key], rows)

    rows = pattern.acquired_rows
    n_acq = rows.size * y.shape[-1]
    energy = np.sum(np.abs(y[:, rows, :]) ** 2, axis=(1, 2))
    sigma = np.sqrt(noise_frac * energy / (2 * n_acq))
    if noise_frac > 0:
        gen = as_generator(rng)
        for c in range(y.shape[0]):
            y[c, rows, :] += complex_gaussian(gen, (rows.size, y.shape[-1]), sigma[c])

    dc_key = tuple(float(v) for v in m.triples[pattern.dc_shot - 1])
    return SimRecord(
        x_ref=poses[dc_key],
        y=y,
        m_true=m,
        coils=coils,
        pattern=pattern,
        noise_sigma=sigma,
        seed=int(seed),
        noise_frac=float(noise_frac),
        record_id=record_id,
    )


def mix_two_acquisitions(y1, y2, pattern: ShotPattern, s_star: int) -> np.ndarray:
    """Rows of shots before ``s_star`` from ``y1``, the rest from ``y2``."""
    y1 = check_kspace(y1, "y1")
    y2 = check_kspace(y2, "y2")
    if y1.shape != y2.shape:
        raise DimensionError(f"geometry mismatch: {y1.shape} vs {y2.shape}")
    if y1.shape[1] != pattern.H:
        raise DimensionError(f"k-space has {y1.shape[1]} rows, pattern expects {pattern.H}")
    if not 2 <= s_star <= pattern.S:
        raise ParameterError(f"s_star must be in [2, {pattern.S}], got {s_star}")
    out = np.zeros_like(y1)
    for s in range(1, pattern.S + 1):
        rows = pattern.shot_rows(s)
        src = y1 if s < s_star else y2
        out[:, rows, :] = src[:, rows, :]
    return out


# ---------------------------------------------------------------------------
# Corpora
# ---------------------------------------------------------------------------

DEFAULT_CORPUS_CONFIG = {
    "H": 64,
    "W": 64,
    "S": 6,
    "R": 3,
    "acs": 8,
    "coils": 4,
    "fov_mm": 260.0,
    "seed": 0,
    "noise_frac": 0.05,
    "phantom": "random-ellipses",
    "max_trans_mm": 10.0,
    "max_rot_deg": 10.0,
    "per_shot_motion": False,
    "splits": {"train": 553, "val": 197, "test": 100},
}


def resolve_corpus_config(config: dict | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CORPUS_CONFIG))
    for key, value in (config or {}).items():
        if key not in cfg:
            raise ParameterError(f"unknown corpus setting {key!r}")
        if key == "splits":
            value = {str(k): int(v) for k, v in value.items()}
        cfg[key] = value
    for key in ("H", "W", "S", "R", "coils"):
        if int(cfg[key]) < 1:
            raise ParameterError(f"{key} must be positive")
    if not 0 <= float(cfg["noise_frac"]):
        raise ParameterError("noise_frac must be >= 0")
    return cfg


_SPLIT_OFFSET = {"train": 0, "val": 1, "test": 2}


def record_seed(corpus_seed: int, split: str, index: int) -> int:
    """Per-record seed; splits draw from disjoint seed sequences."""
    split_key = _SPLIT_OFFSET.get(split, 3 + sum(map(ord, split)))
    ss = np.random.SeedSequence(int(corpus_seed), spawn_key=(split_key, int(index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def simulate_record(cfg: dict, pattern: ShotPattern, seed: int, record_id: str = "", onset=None) -> SimRecord:
    H, W = int(cfg["H"]), int(cfg["W"])
    spacing = float(cfg["fov_mm"]) / W
    x_src = make_phantom(RngStream(seed, STREAM_PHANTOM), H, W, cfg["phantom"])
    coils = synth_coil_profiles(RngStream(seed, STREAM_COILS), H, W, int(cfg["coils"]))
    m = sample_motion(
        RngStream(seed, STREAM_MOTION),
        pattern.S,
        float(cfg["max_trans_mm"]),
        float(cfg["max_rot_deg"]),
        pixel_spacing=spacing,
        per_shot=bool(cfg["per_shot_motion"]),
        onset=onset,
    )
    return simulate_corrupted(
        x_src, coils, pattern, m, RngStream(seed, STREAM_NOISE), float(cfg["noise_frac"]),
        seed=seed, record_id=record_id,
    )


def corpus_pattern(cfg: dict) -> ShotPattern:
    from .forward import make_shot_pattern

    return make_shot_pattern(int(cfg["H"]), int(cfg["S"]), int(cfg["R"]), int(cfg["acs"]))


def generate_split(cfg: dict, split: str, count: int | None = None, onset=None):
    """Yield the records of one split in index order."""
    cfg = resolve_corpus_config(cfg)
    pattern = corpus_pattern(cfg)
    n = cfg["splits"].get(split, 0) if count is None else count
    for i in range(n):
        seed = record_seed(cfg["seed"], split, i)
        yield simulate_record(cfg, pattern, seed, f"{split}-{i:04d}", onset=onset)


def save_record(rec: SimRecord, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "y.mtns", rec.y)
    write_tensor(d / "xref.mtns", rec.x_ref)
    write_tensor(d / "coils.mtns", rec.coils)
    motion = {
        "s_star": rec.s_star,
        "triples": rec.m_true.to_json(),
        "pixel_spacing": rec.m_true.pixel_spacing,
        "seed": rec.seed,
        "noise_sigma": [float(s) for s in rec.noise_sigma],
    }
    (d / "motion.json").write_text(json.dumps(motion, indent=1) + "\n")


def load_record(directory, pattern: ShotPattern, noise_frac: float = 0.0) -> SimRecord:
    d = Path(directory)
    motion = json.loads((d / "motion.json").read_text())
    return SimRecord(
        x_ref=read_tensor(d / "xref.mtns").astype(np.complex128),
        y=read_tensor(d / "y.mtns").astype(np.complex128),
        m_true=MotionParams(np.array(motion["triples"]), float(motion["pixel_spacing"])),
        coils=read_tensor(d / "coils.mtns").astype(np.complex128),
        pattern=pattern,
        noise_sigma=np.array(motion.get("noise_sigma", [])),
        seed=int(motion["seed"]),
        noise_frac=noise_frac,
        record_id=d.name,
    )


class Corpus:
    """Read access to a corpus directory written by :func:`write_corpus`."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / "manifest.json"
        if not manifest.is_file():
            raise FileNotFoundError(f"no manifest.json under {self.root}")
        self.manifest = json.loads(manifest.read_text())
        self.config = self.manifest["config"]
        self.pattern = ShotPattern.from_json(self.manifest["pattern"])

    def record_ids(self, split: str) -> list:
        return list(self.manifest["records"].get(split, []))

    def load(self, split: str, record_id: str) -> SimRecord:
        return load_record(
            self.root / split / record_id, self.pattern, float(self.config["noise_frac"])
        )

    def records(self, split: str, limit: int | None = None) -> list:
        ids = self.record_ids(split)
        if limit is not None:
            ids = ids[:limit]
        return [self.load(split, rid) for rid in ids]


def write_corpus(cfg: dict, out_dir, *, threads: int = 1) -> dict:
    """Simulate every split and write the corpus directory; returns the manifest."""
    cfg = resolve_corpus_config(cfg)
    pattern = corpus_pattern(cfg)
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    records = {}
    sigmas = {}
    jobs = []
    for split, count in cfg["splits"].items():
        records[split] = []
        for i in range(int(count)):
            rid = f"{split}-{i:04d}"
            records[split].append(rid)
            jobs.append((split, i, rid))

    def run(job):
        split, i, rid = job
        seed = record_seed(cfg["seed"], split, i)
        rec = simulate_record(cfg, pattern, seed, rid)
        save_record(rec, root / split / rid)
        return rid, seed, [float(s) for s in rec.noise_sigma]

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    seeds = {}
    for rid, seed, sig in results:
        seeds[rid] = seed
        sigmas[rid] = sig

    manifest = {
        "format": "hypermoco-corpus/1",
        "config": cfg,
        "pattern": pattern.to_json(),
        "geometry": {"H": cfg["H"], "W": cfg["W"], "coils": cfg["coils"], "pixel_spacing_mm": cfg["fov_mm"] / cfg["W"]},
        "noise_frac": cfg["noise_frac"],
        "records": records,
        "seeds": seeds,
        "noise_sigma": sigmas,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest
