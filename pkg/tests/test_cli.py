import json
import subprocess
import sys
from pathlib import Path

import pytest

from hypermoco.cli import EXIT_CONFIG, METHODS, config_hash, main

CORPUS = {"noise_frac": 0.0, "splits": {"train": 4, "test": 2}, "seed": 9}


def tree(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def write_cfg(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(d / "corpus.json", CORPUS)
    assert main(["simulate", "--config", cfg, "--out", str(d / "corpus")]) == 0
    tcfg = write_cfg(d / "train.json", {"features": 4, "hidden": [8], "batch_size": 2, "log_every": 0})
    for mode in ("hypernet", "conv"):
        assert main(["train", "--corpus", str(d / "corpus"), "--config", tcfg, "--mode", mode, "--iters", "3", "--out", str(d / mode)]) == 0
    return d


def test_simulate_outputs(ws):
    files = tree(ws / "corpus")
    run = json.loads(files["run.json"])
    assert run["command"] == "simulate"
    assert run["version"]
    assert run["config_hash"] == config_hash(run["config"])
    assert run["config"]["seed"] == 9 and sum(k.startswith("train-") for k in run["seeds"]["records"]) == 4


def test_simulate_is_independent_of_threads(ws, tmp_path):
    cfg = write_cfg(tmp_path / "c.json", CORPUS)
    assert main(["simulate", "--config", cfg, "--threads", "3", "--out", str(tmp_path / "c3")]) == 0
    assert tree(tmp_path / "c3") == tree(ws / "corpus")


def test_train_outputs_and_threads(ws, tmp_path):
    files = tree(ws / "hypernet")
    assert {"weights.mtns", "layout.json", "loss.csv", "run.json"} <= set(files)
    assert len(files["loss.csv"].decode().strip().splitlines()) == 4
    tcfg = str(ws / "train.json")
    assert main(["train", "--corpus", str(ws / "corpus"), "--config", tcfg, "--mode", "hypernet", "--iters", "3",
                 "--threads", "2", "--out", str(tmp_path / "h2")]) == 0
    assert tree(tmp_path / "h2") == files


def test_correct_is_independent_of_threads(ws, tmp_path):
    outs = []
    for threads in ("1", "2"):
        out = tmp_path / f"c{threads}"
        assert main(["correct", "--corpus", str(ws / "corpus"), "--backend", "model-based", "--trials", "2", "--iters", "2",
                     "--threads", threads, "--out", str(out)]) == 0
        outs.append(tree(out))
    assert outs[0] == outs[1]
    assert {"corrections.csv", "run.json", "records/test-0000/outcome.json", "records/test-0000/trace.csv"} <= set(outs[0])


def test_correct_hypernet_needs_model(ws, tmp_path):
    assert main(["correct", "--corpus", str(ws / "corpus"), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert not (tmp_path / "x").exists()


def test_evaluate_and_report(ws, tmp_path):
    ev = tmp_path / "eval"
    assert main(["evaluate", "--corpus", str(ws / "corpus"), "--hn-model", str(ws / "hypernet"), "--conv-model", str(ws / "conv"),
                 "--trials", "1", "--iters", "2", "--save-images", "--out", str(ev)]) == 0
    summary = json.loads((ev / "summary.json").read_text())
    assert set(summary["methods"]) == set(METHODS)
    assert all(summary["methods"][m]["n_failed"] == 0 for m in METHODS)
    assert len((ev / "metrics.csv").read_text().strip().splitlines()) == 1 + 2 * len(METHODS)
    rep = tmp_path / "rep"
    assert main(["report", "--evaluation", str(ev), "--out", str(rep)]) == 0
    text = (rep / "report.md").read_text()
    assert all(f"| {m} |" in text for m in METHODS)
    assert len(list((rep / "images").glob("*.png"))) == 2 * 2 * len(METHODS)


def test_missing_corpus_leaves_no_output(tmp_path):
    out = tmp_path / "out"
    assert main(["train", "--corpus", str(tmp_path / "nope"), "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()
    assert not list(tmp_path.iterdir())


def test_refuses_non_empty_output(ws, tmp_path):
    out = tmp_path / "busy"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    cfg = write_cfg(tmp_path / "c.json", CORPUS)
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == EXIT_CONFIG
    assert (out / "keep.txt").read_text() == "x"


def test_bad_config_values(tmp_path):
    bad = write_cfg(tmp_path / "bad.json", {"H": 0})
    assert main(["simulate", "--config", bad, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    garbage = tmp_path / "g.json"
    garbage.write_text("{oops")
    assert main(["simulate", "--config", str(garbage), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert not (tmp_path / "o").exists()


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["correct", "--schedule"])
    assert exc.value.code == EXIT_CONFIG


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "hypermoco.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "simulate" in out.stdout
