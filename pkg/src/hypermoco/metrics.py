"""Image-quality metrics, per-method corpus evaluation and image dumps."""
from __future__ import annotations

import csv
import json
import math
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import DimensionError, ParameterError
from .ssim import ssim as _ssim
from .validation import check_real_image, check_same_shape

PSNR_INF = math.inf


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float) -> float:
    """``10 log10(peak^2 / mse)``; identical images give ``inf``."""
    if peak <= 0:
        raise ParameterError("peak must be positive")
    err = mse(a, b)
    if err == 0.0:
        return PSNR_INF
    return float(10.0 * np.log10(peak**2 / err))


def ssim(a, b, dynamic_range: float = 1.0) -> float:
    return _ssim(a, b, dynamic_range)


def image_metrics(img, ref) -> dict:
    """SSIM, MSE and PSNR of magnitude images scaled by the reference maximum."""
    img = np.abs(check_real_image(np.abs(img), "img"))
    ref = np.abs(check_real_image(np.abs(ref), "ref"))
    check_same_shape(img, ref)
    peak = float(ref.max())
    if peak <= 0:
        raise ParameterError("reference image is identically zero")
    a, b = img / peak, ref / peak
    return {"ssim": ssim(a, b, 1.0), "mse": mse(a, b), "psnr": psnr(a, b, 1.0)}


# ---------------------------------------------------------------------------
# Corpus evaluation
# ---------------------------------------------------------------------------


@dataclass
class Method:
    """A named reconstruction ``record -> image`` or ``record -> (image, rejected)``.

    ``exclude_rejected`` drops records the method flags as rejected from its
    aggregate (the rejection-aware variant of a method).
    """

    name: str
    fn: object
    exclude_rejected: bool = False


@dataclass
class EvaluationTable:
    rows: list = field(default_factory=list)
    methods: list = field(default_factory=list)

    def summary(self, baselines=()) -> dict:
        out = {}
        for name in self.methods:
            rows = [r for r in self.rows if r["method"] == name and r["error"] is None]
            kept = [r for r in rows if not (r["exclude_rejected"] and r["rejected"])]
            out[name] = {
                "n": len(kept),
                "n_failed": sum(1 for r in self.rows if r["method"] == name and r["error"] is not None),
                "n_rejected": sum(1 for r in rows if r["rejected"]),
                "ssim_mean": _mean([r["ssim"] for r in kept]),
                "mse_mean": _mean([r["mse"] for r in kept]),
                "psnr_mean": _mean([r["psnr"] for r in kept if math.isfinite(r["psnr"])]),
            }
        deltas = {}
        for base in baselines:
            if base not in out:
                continue
            base_ssim = {r["record_id"]: r["ssim"] for r in self.rows if r["method"] == base and r["error"] is None}
            for name in self.methods:
                if name == base:
                    continue
                diffs = [
                    r["ssim"] - base_ssim[r["record_id"]]
                    for r in self.rows
                    if r["method"] == name
                    and r["error"] is None
                    and not (r["exclude_rejected"] and r["rejected"])
                    and r["record_id"] in base_ssim
                ]
                deltas[f"{name}-vs-{base}"] = _mean(diffs)
        return {"methods": out, "ssim_improvement": deltas}

    def mean(self, method: str, metric: str = "ssim") -> float:
        return self.summary()["methods"][method][f"{metric}_mean"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["record_id", "method", "ssim", "mse", "psnr", "rejected"])
            for r in self.rows:
                w.writerow([r["record_id"], r["method"], _fmt(r["ssim"]), _fmt(r["mse"]), _fmt(r["psnr"]), int(r["rejected"])])

    def write_json(self, path, baselines=()) -> None:
        summary = self.summary(baselines)
        summary["failures"] = [
            {"record_id": r["record_id"], "method": r["method"], "error": r["error"]} for r in self.rows if r["error"]
        ]
        with open(path, "w") as fh:
            json.dump(_json_safe(summary), fh, indent=2, sort_keys=True)


def _mean(vals):
    return float(np.mean(vals)) if vals else float("nan")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return repr(float(v))


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj


def evaluate_methods(records, methods, *, workers: int = 1, images: dict | None = None) -> EvaluationTable:
    """Score every method on every record against ``|x_ref|``.

    A method failure is stored on its row and does not stop the run. When
    ``images`` is a dict it collects ``(record_id, method) -> image``.
    """
    records = list(records)
    methods = [m if isinstance(m, Method) else Method(*m) for m in methods]
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise ParameterError("method names must be unique")

    def run(job):
        rec, meth = job
        row = {
            "record_id": rec.record_id,
            "method": meth.name,
            "ssim": None,
            "mse": None,
            "psnr": None,
            "rejected": False,
            "exclude_rejected": meth.exclude_rejected,
            "error": None,
        }
        try:
            out = meth.fn(rec)
            img, rejected = out if isinstance(out, tuple) else (out, False)
            row.update(image_metrics(img, rec.x_ref))
            row["rejected"] = bool(rejected)
            return row, img
        except Exception as exc:  # noqa: BLE001 - failures are recorded per record
            row["error"] = f"{type(exc).__name__}: {exc}"
            row["traceback"] = traceback.format_exc(limit=3)
            return row, None

    jobs = [(rec, meth) for rec in records for meth in methods]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    table = EvaluationTable(methods=names)
    for (rec, meth), (row, img) in zip(jobs, results):
        table.rows.append(row)
        if images is not None and img is not None:
            images[(rec.record_id, meth.name)] = img
    return table


# ---------------------------------------------------------------------------
# Image dumps
# ---------------------------------------------------------------------------


def to_uint8(img, vmax: float | None = None) -> np.ndarray:
    img = np.abs(np.asarray(img, dtype=np.complex128 if np.iscomplexobj(img) else np.float64))
    if img.ndim != 2:
        raise DimensionError("image dumps expect 2D arrays")
    vmax = float(img.max()) if vmax is None else float(vmax)
    if vmax <= 0:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.clip(np.round(img / vmax * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img, vmax: float | None = None) -> None:
    """8-bit binary PGM (P5)."""
    data = to_uint8(img, vmax)
    H, W = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_png(path, img, vmax: float | None = None) -> None:
    Image.fromarray(to_uint8(img, vmax), mode="L").save(path, format="PNG")


def dump_images(out_dir, images: dict, references: dict) -> list:
    """Write reconstructions and ``|error|`` maps as PGM and PNG.

    ``images`` maps ``(record_id, method)`` to an image; ``references`` maps
    ``record_id`` to the reference image. All images of a record share the
    reference's grey scale.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for (rid, method), img in sorted(images.items()):
        ref = np.abs(references[rid])
        vmax = float(ref.max()) or None
        stem = f"{rid}_{method}".replace("/", "_")
        err = np.abs(np.abs(img) - ref)
        for suffix, data in (("", img), ("_err", err)):
            for ext, writer in (("pgm", write_pgm), ("png", write_png)):
                path = out / f"{stem}{suffix}.{ext}"
                writer(path, data, vmax)
                written.append(path)
    return written
