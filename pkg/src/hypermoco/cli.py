"""Command-line entry point: ``hypermoco simulate | train | correct | evaluate | report``.

Every command resolves its configuration (JSON file plus flags), writes
into a staging directory and renames it onto ``--out`` only on success, so
a failed run leaves no partial outputs. Exit codes: 2 configuration, 3 IO,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import subprocess
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .classical import arc_interp, model_based_gt, rss_recon
from .exceptions import (
    CalibrationError,
    ConfigurationError,
    DimensionError,
    DivergenceError,
    FormatError,
    OptimizationError,
    ParameterError,
    SolverError,
)
from .metrics import Method, dump_images, evaluate_methods
from .moco import (
    DEFAULT_ITERS,
    DEFAULT_REJECT_THRESHOLD,
    DEFAULT_SCHEDULE,
    DEFAULT_TRIALS,
    HypernetBackend,
    ModelBasedBackend,
    Schedule,
    estimate_motion,
    parse_schedule,
    write_outcome,
)
from .mtns import read_tensor, write_tensor
from .network import ReconNetwork
from .sim import Corpus, resolve_corpus_config, write_corpus
from .training import TrainConfig, train, write_loss_csv

log = logging.getLogger("hypermoco")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

METHODS = ("ARC", "Conv", "HN", "HN-R", "Model-Based-GT", "HN-GT")


class CLIError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Run bookkeeping
# ---------------------------------------------------------------------------


def describe_version() -> str:
    """``git describe``-style version string of the installed code."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=10,
            check=True,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        return f"v{__version__}"
    if not out:
        return f"v{__version__}"
    if out.startswith("v") or "-g" in out:
        return out
    # no tags: bare abbreviated hash, possibly with -dirty
    return f"v{__version__}-0-g{out}"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return "sha256:" + hashlib.sha256(blob).hexdigest()


def run_record(command: str, config: dict, seeds: dict, inputs: dict | None = None) -> dict:
    return {
        "command": command,
        "version": describe_version(),
        "config": config,
        "config_hash": config_hash(config),
        "seeds": seeds,
        "inputs": inputs or {},
    }


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class Staging:
    """Write into a sibling temp dir; move onto ``out`` on success only."""

    def __init__(self, out, force=False):
        self.out = Path(out)
        self.force = force
        self.dir = None

    def __enter__(self):
        if self.out.exists() and any(self.out.iterdir()) and not self.force:
            raise CLIError(f"output directory {self.out} is not empty (use --force)", EXIT_CONFIG)
        try:
            self.out.parent.mkdir(parents=True, exist_ok=True)
            self.dir = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.", dir=self.out.parent))
        except OSError as exc:
            raise CLIError(f"cannot create output directory: {exc}", EXIT_IO) from exc
        return self.dir

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.dir, ignore_errors=True)
            return False
        try:
            if self.out.exists():
                shutil.rmtree(self.out)
            self.dir.rename(self.out)
        except OSError as exc:
            shutil.rmtree(self.dir, ignore_errors=True)
            raise CLIError(f"cannot finalize {self.out}: {exc}", EXIT_IO) from exc
        return False


def _load_json_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"config file not found: {p}", EXIT_CONFIG)
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CLIError(f"invalid JSON in {p}: {exc}", EXIT_CONFIG) from exc
    if not isinstance(obj, dict):
        raise CLIError(f"config {p} must hold a JSON object", EXIT_CONFIG)
    return obj


def _open_corpus(path) -> Corpus:
    if path is None or not Path(path).is_dir():
        raise CLIError(f"corpus directory not found: {path}", EXIT_CONFIG)
    try:
        return Corpus(path)
    except FileNotFoundError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from exc
    except (KeyError, json.JSONDecodeError) as exc:
        raise CLIError(f"malformed corpus manifest: {exc}", EXIT_CONFIG) from exc


def _open_model(path) -> ReconNetwork:
    if path is None or not Path(path).is_dir():
        raise CLIError(f"model directory not found: {path}", EXIT_CONFIG)
    return ReconNetwork.load(path)


def _records(corpus: Corpus, split: str, limit):
    ids = corpus.record_ids(split)
    if not ids:
        raise CLIError(f"corpus split {split!r} is empty or missing", EXIT_CONFIG)
    return corpus.records(split, limit)


def _pmap(fn, items, threads):
    items = list(items)
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    raw = _load_json_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = resolve_corpus_config(raw)
    except ParameterError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from exc
    with Staging(args.out, args.force) as tmp:
        manifest = write_corpus(cfg, tmp, threads=args.threads)
        _write_json(tmp / "run.json", run_record("simulate", cfg, {"corpus": cfg["seed"], "records": manifest["seeds"]}))
    n = sum(len(v) for v in manifest["records"].values())
    print(f"wrote {n} records to {args.out}")
    return EXIT_OK


def resolve_train_config(args) -> tuple:
    raw = _load_json_config(args.config)
    mode = raw.pop("mode", "hypernet") if args.mode is None else args.mode
    raw.pop("mode", None)
    split = raw.pop("split", "train")
    limit = raw.pop("limit", None) if args.limit is None else args.limit
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.iters is not None:
        raw["iters"] = args.iters
    if mode not in ("hypernet", "conv"):
        raise CLIError(f"unknown mode {mode!r}", EXIT_CONFIG)
    try:
        cfg = TrainConfig.from_json(raw)
    except (ParameterError, TypeError) as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from exc
    return cfg, mode, split, limit


def cmd_train(args) -> int:
    cfg, mode, split, limit = resolve_train_config(args)
    corpus = _open_corpus(args.corpus)
    records = _records(corpus, split, limit)
    full = {"train": cfg.to_json(), "mode": mode, "split": split, "limit": limit}
    with Staging(args.out, args.force) as tmp:
        result = train(records, corpus.pattern, records[0].coils.shape[0], cfg, mode)
        result.network.save(tmp)
        write_loss_csv(tmp / "loss.csv", result.losses)
        _write_json(
            tmp / "run.json",
            run_record("train", full, {"train": cfg.seed}, {"corpus": str(args.corpus), "records": [r.record_id for r in records]}),
        )
    print(f"trained {mode} model on {len(records)} records; final loss {result.losses[-1]:.5f}")
    return EXIT_OK


def resolve_correct_config(args, raw=None) -> dict:
    raw = dict(_load_json_config(args.config) if raw is None else raw)
    cfg = {
        "backend": "hypernet",
        "trials": DEFAULT_TRIALS,
        "iters": DEFAULT_ITERS,
        "schedule": "{}:{},{},{}".format(*DEFAULT_SCHEDULE),
        "reject_threshold": DEFAULT_REJECT_THRESHOLD,
        "cg_iters": 10,
        "split": "test",
        "limit": None,
        "seed": 0,
    }
    unknown = set(raw) - set(cfg)
    if unknown:
        raise CLIError(f"unknown correction options: {sorted(unknown)}", EXIT_CONFIG)
    cfg.update(raw)
    for key in ("backend", "trials", "iters", "schedule", "reject_threshold", "seed", "limit", "split"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg["backend"] not in ("hypernet", "model-based"):
        raise CLIError(f"unknown backend {cfg['backend']!r}", EXIT_CONFIG)
    if int(cfg["trials"]) < 1 or int(cfg["iters"]) < 0:
        raise CLIError("trials must be >= 1 and iters >= 0", EXIT_CONFIG)
    if not 0 < float(cfg["reject_threshold"]):
        raise CLIError("reject threshold must be positive", EXIT_CONFIG)
    try:
        sched = parse_schedule(cfg["schedule"])
    except ParameterError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from exc
    cfg["schedule"] = _schedule_text(sched)
    return cfg


def _schedule_text(s: Schedule) -> str:
    if s.kind == "constant":
        return f"constant:{s.hi!r}"
    return f"{s.kind}:{s.hi!r},{s.lo!r},{s.period}"


def _correct_records(records, cfg, network, threads):
    sched = parse_schedule(cfg["schedule"])

    def run(rec):
        if cfg["backend"] == "hypernet":
            backend = HypernetBackend(network, rec.coils, rec.pattern)
        else:
            backend = ModelBasedBackend(rec.coils, rec.pattern, lam=0.0, cg_iters=int(cfg["cg_iters"]))
        return estimate_motion(
            rec.y,
            backend,
            int(cfg["trials"]),
            int(cfg["iters"]),
            sched,
            seed=int(cfg["seed"]),
            reject_threshold=float(cfg["reject_threshold"]),
            pixel_spacing=rec.m_true.pixel_spacing,
        )

    return _pmap(run, records, threads)


def _write_corrections(root: Path, records, outcomes):
    rows = []
    for rec, out in zip(records, outcomes):
        d = root / "records" / rec.record_id
        d.mkdir(parents=True)
        write_outcome(out, d / "outcome.json", d / "trace.csv")
        write_tensor(d / "x_hat.mtns", out.x_hat.astype(np.float32))
        rows.append([rec.record_id, repr(out.dc_fraction), int(out.rejected), out.best_trial.trial])
    with open(root / "corrections.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", "dc_fraction", "rejected", "best_trial"])
        w.writerows(rows)


def cmd_correct(args) -> int:
    cfg = resolve_correct_config(args)
    corpus = _open_corpus(args.corpus)
    network = None
    if cfg["backend"] == "hypernet":
        if args.model is None:
            raise CLIError("--backend hypernet needs --model", EXIT_CONFIG)
        network = _open_model(args.model)
    records = _records(corpus, cfg["split"], cfg["limit"])
    with Staging(args.out, args.force) as tmp:
        outcomes = _correct_records(records, cfg, network, args.threads)
        _write_corrections(tmp, records, outcomes)
        _write_json(
            tmp / "run.json",
            run_record(
                "correct",
                cfg,
                {"trials": cfg["seed"]},
                {"corpus": str(args.corpus), "model": None if args.model is None else str(args.model)},
            ),
        )
    n_rej = sum(o.rejected for o in outcomes)
    print(f"corrected {len(outcomes)} records ({n_rej} rejected)")
    return EXIT_OK


def _load_corrections(path, records):
    root = Path(path)
    if not (root / "records").is_dir():
        raise CLIError(f"not a correction run: {root}", EXIT_CONFIG)
    out = {}
    for rec in records:
        d = root / "records" / rec.record_id
        if not d.is_dir():
            raise CLIError(f"correction run lacks record {rec.record_id}", EXIT_CONFIG)
        meta = json.loads((d / "outcome.json").read_text())
        out[rec.record_id] = (read_tensor(d / "x_hat.mtns").astype(np.float64), bool(meta["rejected"]))
    return out


def cmd_evaluate(args) -> int:
    corpus = _open_corpus(args.corpus)
    hn = _open_model(args.hn_model)
    conv = _open_model(args.conv_model)
    raw = _load_json_config(args.config)
    ccfg = resolve_correct_config(args, {k: v for k, v in raw.items() if k != "mb_lambda"})
    ccfg["backend"] = "hypernet"
    mb_lambda = raw.get("mb_lambda", 0.0 if float(corpus.config["noise_frac"]) == 0.0 else None)
    records = _records(corpus, ccfg["split"], ccfg["limit"])
    if args.corrections is not None:
        corrections = _load_corrections(args.corrections, records)
    else:
        outs = _correct_records(records, ccfg, hn, args.threads)
        corrections = {r.record_id: (o.x_hat, o.rejected) for r, o in zip(records, outs)}
    methods = [
        Method("ARC", lambda r: rss_recon(arc_interp(r.y, r.pattern))),
        Method("Conv", lambda r: conv.reconstruct(r.y, r.m_ref)),
        Method("HN", lambda r: corrections[r.record_id]),
        Method("HN-R", lambda r: corrections[r.record_id], exclude_rejected=True),
        Method("Model-Based-GT", lambda r: model_based_gt(r.y, r.coils, r.pattern, r.m_true, mb_lambda)),
        Method("HN-GT", lambda r: hn.reconstruct(r.y, r.m_ref)),
    ]
    images = {} if args.save_images else None
    table = evaluate_methods(records, methods, workers=args.threads, images=images)
    cfg = {"correct": ccfg, "mb_lambda": mb_lambda, "methods": list(METHODS), "save_images": bool(args.save_images)}
    with Staging(args.out, args.force) as tmp:
        table.write_csv(tmp / "metrics.csv")
        table.write_json(tmp / "summary.json", baselines=("ARC", "Conv"))
        if images is not None:
            for (rid, name), img in sorted(images.items()):
                d = tmp / "recons" / rid
                d.mkdir(parents=True, exist_ok=True)
                write_tensor(d / f"{name}.mtns", np.abs(img).astype(np.float32))
        _write_json(
            tmp / "run.json",
            run_record(
                "evaluate",
                cfg,
                {"trials": ccfg["seed"]},
                {
                    "corpus": str(args.corpus),
                    "hn_model": str(args.hn_model),
                    "conv_model": str(args.conv_model),
                    "corrections": None if args.corrections is None else str(args.corrections),
                },
            ),
        )
    summary = table.summary()["methods"]
    for name in METHODS:
        s = summary[name]
        print(f"{name:16s} ssim {s['ssim_mean']:.4f}  n={s['n']}  rejected={s['n_rejected']}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.evaluation)
    if not (run / "summary.json").is_file():
        raise CLIError(f"not an evaluation run: {run}", EXIT_CONFIG)
    summary = json.loads((run / "summary.json").read_text())
    meta = json.loads((run / "run.json").read_text())
    lines = ["# Evaluation report", "", f"version: {meta['version']}  config: {meta['config_hash']}", ""]
    lines += ["| method | n | rejected | SSIM | MSE | PSNR |", "|---|---|---|---|---|---|"]
    for name, s in summary["methods"].items():
        lines.append(
            f"| {name} | {s['n']} | {s['n_rejected']} | {_num(s['ssim_mean'])} | {_num(s['mse_mean'], 3)} | {_num(s['psnr_mean'], 2)} |"
        )
    lines += ["", "| SSIM improvement | mean delta |", "|---|---|"]
    for key, val in sorted(summary["ssim_improvement"].items()):
        lines.append(f"| {key} | {_num(val)} |")
    with Staging(args.out, args.force) as tmp:
        (tmp / "report.md").write_text("\n".join(lines) + "\n")
        recons = run / "recons"
        if recons.is_dir():
            corpus = _open_corpus(meta["inputs"]["corpus"])
            split = meta["config"]["correct"]["split"]
            images, refs = {}, {}
            for d in sorted(p for p in recons.iterdir() if p.is_dir()):
                refs[d.name] = np.abs(corpus.load(split, d.name).x_ref)
                for f in sorted(d.glob("*.mtns")):
                    images[(d.name, f.stem)] = read_tensor(f).astype(np.float64)
            dump_images(tmp / "images", images, refs)
        _write_json(tmp / "run.json", run_record("report", {"evaluation": str(run)}, meta.get("seeds", {})))
    print((Path(args.out) / "report.md").read_text(), end="")
    return EXIT_OK


def _num(v, digits=4):
    if isinstance(v, str):
        return v
    return "nan" if v is None or v != v else f"{v:.{digits}f}"


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _positive_int(text):
    try:
        v = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from exc
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hypermoco", description="Rigid-motion correction for multi-shot 2D MRI: simulation, training, correction and evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=_positive_int, default=1, help="worker threads (results do not depend on it)")
        sp.add_argument("--force", action="store_true", help="replace a non-empty output directory")
        sp.add_argument("-v", "--verbose", action="store_true")

    def correction_flags(sp):
        sp.add_argument("--trials", type=_positive_int)
        sp.add_argument("--iters", type=int)
        sp.add_argument("--schedule", help="cyclic-exp:hi,lo,period or constant:value")
        sp.add_argument("--reject-threshold", type=float, dest="reject_threshold")
        sp.add_argument("--split")
        sp.add_argument("--limit", type=_positive_int)

    sp = sub.add_parser("simulate", help="simulate a motion-corrupted corpus")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train the hypernetwork or the plain ablation")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--mode", choices=("hypernet", "conv"))
    sp.add_argument("--iters", type=_positive_int)
    sp.add_argument("--limit", type=_positive_int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("correct", help="estimate motion and reconstruct")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--model")
    sp.add_argument("--backend", choices=("hypernet", "model-based"))
    correction_flags(sp)
    sp.set_defaults(func=cmd_correct)

    sp = sub.add_parser("evaluate", help="score all methods on a corpus split")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--hn-model", required=True, dest="hn_model")
    sp.add_argument("--conv-model", required=True, dest="conv_model")
    sp.add_argument("--corrections", help="a correct run made with the hypernet backend")
    sp.add_argument("--save-images", action="store_true", dest="save_images")
    correction_flags(sp)
    sp.set_defaults(func=cmd_evaluate, backend=None)

    sp = sub.add_parser("report", help="tables and image dumps from an evaluation run")
    sp.add_argument("--evaluation", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.add_argument("-v", "--verbose", action="store_true")
    sp.set_defaults(func=cmd_report, threads=1)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"hypermoco: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigurationError, ParameterError, DimensionError, FormatError) as exc:
        print(f"hypermoco: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, OptimizationError, SolverError, CalibrationError, FloatingPointError) as exc:
        print(f"hypermoco: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"hypermoco: IO error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
