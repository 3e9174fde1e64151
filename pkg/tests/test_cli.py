"""CLI contract: exit codes, manifests, determinism, config precedence.

Subcommands run in-process through run(argv) for speed; the re-exec thread
pinning of bench is exercised separately in the acceptance gate.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from footholds.cli import run
from footholds.inference import parse_decision
from footholds.labeler import load_dataset
from footholds.net import NetConfig, init_params, save_model
from footholds.terrain import load_heightmap, load_pgm

TINY_NET = ["--widths", "4,8,16", "--mid-blocks", "1", "--deep-blocks", "2",
            "--up-blocks", "1,1"]


def test_terrain_writes_map_and_manifest(tmp_path):
    out = tmp_path / "m.hm"
    assert run(["terrain", "--kind", "stairs", "--rise", "0.1",
                "--run", "0.2", "--seed", "1", "-o", str(out)]) == 0
    emap = load_heightmap(out)
    assert emap.heights.shape == (200, 200)
    man = json.loads((tmp_path / "m.hm.run.json").read_text())
    assert man["subcommand"] == "terrain"
    assert man["seed"] == 1
    assert man["config"]["spec"]["kind"] == "stairs"
    assert man["version"]
    assert man["timings"]["wall_s"] >= 0


def test_terrain_repeat_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.hm", tmp_path / "b.hm"
    for out in (a, b):
        assert run(["terrain", "--kind", "rough", "--seed", "7",
                    "-o", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_usage_errors_exit_1(capsys):
    assert run(["train"]) == 1                      # missing --data/--out
    assert run(["nosuchcmd"]) == 1
    assert run(["terrain", "--kind", "volcano", "-o", "x"]) == 1
    capsys.readouterr()


def test_missing_input_exits_2(tmp_path, capsys):
    assert run(["eval", "--data", str(tmp_path / "nope")]) == 2
    assert run(["infer", "--map", str(tmp_path / "nope.hm"),
                "--base", "1,1", "--evaluator", "oracle"]) == 2
    capsys.readouterr()


def test_help_exits_0(capsys):
    assert run(["--help"]) == 0
    capsys.readouterr()


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds") / "d"
    assert run(["label", "-o", str(out), "--samples", "6", "--seed", "3",
                "--deterministic"]) == 0
    return out


def test_label_outputs(small_dataset):
    images, labels, manifest = load_dataset(small_dataset)
    assert images.shape == (6, 40, 40) and labels.shape == (6, 40, 40)
    assert manifest["leg"] == "LF"
    for fname in manifest["leg_files"].values():
        assert (small_dataset / fname).exists()
    man = json.loads((small_dataset / "run.json").read_text())
    assert man["timings"] is None                   # deterministic mode
    assert man["results"]["samples"] == 6


def test_label_jobs_do_not_change_outputs(tmp_path, small_dataset):
    out = tmp_path / "d2"
    assert run(["label", "-o", str(out), "--samples", "6", "--seed", "3",
                "--jobs", "2", "--deterministic"]) == 0
    for i in range(6):
        for stem in ("input", "label"):
            name = f"{stem}_{i:05d}.pgm"
            assert (out / name).read_bytes() == \
                (small_dataset / name).read_bytes()
    assert (out / "manifest.json").read_bytes() == \
        (small_dataset / "manifest.json").read_bytes()


def test_config_file_loses_to_flags(tmp_path):
    conf = tmp_path / "t.cfg"
    conf.write_text("kind = stairs\nrise = 0.2\nseed = 9\n")
    out = tmp_path / "m.hm"
    assert run(["terrain", "--config", str(conf), "--kind", "flat",
                "-o", str(out)]) == 0
    man = json.loads((tmp_path / "m.hm.run.json").read_text())
    assert man["config"]["spec"]["kind"] == "flat"    # flag wins
    assert man["config"]["spec"]["rise"] == 0.2       # file fills the rest
    assert man["seed"] == 9


def test_train_eval_infer_end_to_end(tmp_path, small_dataset, capsys):
    model = tmp_path / "m.ftn"
    code = run(["train", "--data", str(small_dataset), "-o", str(model),
                "--epochs", "2", "--seed", "0", "--deterministic"]
               + TINY_NET)
    assert code == 0
    assert model.exists()
    csv_lines = (tmp_path / "m.csv").read_text().strip().splitlines()
    assert len(csv_lines) == 3                       # header + 2 epochs
    assert csv_lines[0].startswith("epoch,lr,loss")
    man = json.loads((tmp_path / "m.ftn.run.json").read_text())
    assert man["results"]["epochs"] == 2

    table = tmp_path / "eval.txt"
    assert run(["eval", "--data", str(small_dataset), "--model", str(model),
                "-o", str(table)]) == 0
    text = table.read_text()
    assert "pixel accuracy" in text and "mean IoU" in text

    # oracle as its own predictor reproduces the stored labels exactly
    oracle_table = tmp_path / "oracle.txt"
    assert run(["eval", "--data", str(small_dataset), "--predictor",
                "oracle", "-o", str(oracle_table)]) == 0
    assert "pixel accuracy 1.0000" in oracle_table.read_text()
    assert "mean IoU       1.0000" in oracle_table.read_text()

    hm = tmp_path / "flat.hm"
    assert run(["terrain", "--kind", "flat", "-o", str(hm)]) == 0
    dec = tmp_path / "dec.txt"
    lab = tmp_path / "lab.pgm"
    cost = tmp_path / "cost.pgm"
    assert run(["infer", "--map", str(hm), "--base", "2.0,2.0",
                "--evaluator", "oracle", "-o", str(dec),
                "--dump-labels", str(lab), "--dump-cost", str(cost)]) == 0
    name, d = parse_decision(dec.read_text().strip())
    assert name == "LF"
    assert d.cell == (20, 20)                        # flat: nominal wins
    labels = load_pgm(lab)
    assert labels.shape == (40, 40)
    assert load_pgm(cost).shape == (40, 40)
    assert labels[20, 20] == d.class_id
    capsys.readouterr()


def test_infer_network_evaluator(tmp_path, capsys):
    model = tmp_path / "t.ftn"
    cfg = NetConfig(widths=(4, 8, 16), mid_blocks=1, deep_blocks=2,
                    up_blocks=(1, 1))
    save_model(model, init_params(cfg, seed=0), cfg, np.ones(14, np.float32))
    hm = tmp_path / "m.hm"
    assert run(["terrain", "--kind", "flat", "-o", str(hm)]) == 0
    dec = tmp_path / "d.txt"
    assert run(["infer", "--map", str(hm), "--base", "2.0,2.0",
                "--leg", "RF", "--model", str(model), "--model-leg", "LF",
                "-o", str(dec)]) == 0
    name, d = parse_decision(dec.read_text().strip())
    assert name == "RF" and 0 <= d.class_id < 14
    # front model cannot serve a rear leg
    assert run(["infer", "--map", str(hm), "--base", "2.0,2.0",
                "--leg", "LH", "--model", str(model), "--model-leg", "LF",
                "-o", str(dec)]) == 2
    capsys.readouterr()


def test_train_divergence_exits_3(tmp_path, small_dataset, capsys):
    with np.errstate(invalid="ignore", over="ignore"):
        code = run(["train", "--data", str(small_dataset),
                    "-o", str(tmp_path / "x.ftn"), "--epochs", "3",
                    "--lr", "1e9"] + TINY_NET)
    assert code == 3
    capsys.readouterr()


def test_bench_manifest(tmp_path, capsys):
    model = tmp_path / "t.ftn"
    cfg = NetConfig(widths=(4, 8, 16), mid_blocks=1, deep_blocks=2,
                    up_blocks=(1, 1))
    save_model(model, init_params(cfg, seed=0), cfg, np.ones(14, np.float32))
    out = tmp_path / "bench.json"
    assert run(["bench", "--model", str(model), "--n", "5", "--warmup", "2",
                "-o", str(out)]) == 0
    man = json.loads(out.read_text())
    r = man["results"]
    assert r["n"] == 5
    assert 0 < r["p50_ms"] <= r["p99_ms"] <= r["max_ms"]
    assert man["host"]["cpu"]
    assert man["host"]["numpy"] == np.__version__
    capsys.readouterr()
