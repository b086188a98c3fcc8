import json
import subprocess
import sys

import numpy as np
import pytest
from conftest import tiny_config

from skelfusion.cli import main
from skelfusion.skeleton import Action, FoldSplit, builtin_body_model, load_actions, save_body_model, save_dataset


def run_cli(*argv):
    """Exit code of ``main``; argparse usage errors surface as SystemExit."""
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "ds.jsonl"
    bm = tmp_path / "bm.json"
    code = run_cli("generate", "-o", path, "--body-model-out", bm, "--classes", 3, "--per-class", 4,
                   "--min-length", 20, "--max-length", 30, "--seed", 3)
    assert code == 0
    return path, bm


def test_generate_split_and_preprocess(tmp_path, data, capsys):
    path, bm = data
    assert len(load_actions(path)) == 12
    assert run_cli("split", path, "--body-model", bm, "-o", tmp_path / "folds.csv") == 0
    split = FoldSplit.load(tmp_path / "folds.csv")
    assert len(split.ids(1)) == len(split.ids(2)) == 6

    tech = json.dumps({"id": "bm", "norm": "pos", "test_aug": {"kind": "keypose", "dist": 0.05}})
    out = tmp_path / "pre.jsonl"
    assert run_cli("preprocess", path, "--body-model", bm, "--technique", tech, "--role", "test",
                   "-o", out, "--body-model-out", tmp_path / "bm_out.json") == 0
    variants = load_actions(out)
    assert len(variants) == 12 and all(a.fps == 0 for a in variants)
    assert "12 test variants" in capsys.readouterr().out


def test_train_and_classify(tmp_path, data, capsys):
    path, bm = data
    tech_file = tmp_path / "tech.json"
    tech_file.write_text(json.dumps({"id": "pos", "norm": "pos"}))
    model = tmp_path / "m.npz"
    assert run_cli("train", path, "--body-model", bm, "--technique", tech_file, "--downsample", 2,
                   "--epochs", 2, "--embed", 4, "--hidden", 8, "--init-scale", 0.5, "-o", model) == 0
    capsys.readouterr()
    assert run_cli("classify", model, path) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "action_id,predicted_class,probability"
    assert len(lines) == 13
    assert all(line.split(",")[1].startswith("class_") for line in lines[1:])


def test_run_fuse_report_and_allinone(tmp_path, capsys):
    doc = tiny_config(tmp_path)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(doc))
    assert run_cli("run", cfg) == 0
    assert "accuracy of fusion" in capsys.readouterr().out
    results = tmp_path / "results"
    combos = (results / "combinations.csv").read_text()

    cache = results / "cache"
    assert run_cli("fuse", cache / "run1", cache / "run2", "-o", tmp_path / "fused",
                   "--cardinalities", "1,2", "--top", 2, "--dataset", doc["dataset"],
                   "--body-model", "builtin:hdm05-12") == 0
    assert (tmp_path / "fused" / "combinations.csv").read_text() == combos

    assert run_cli("report", results, "--cardinalities", "2", "--top", 1) == 0
    assert "2/2" in capsys.readouterr().out

    assert run_cli("allinone", cfg, "--techniques", "P,POS", "--output-dir", tmp_path / "aio") == 0
    assert "all-in-one model" in capsys.readouterr().out


def test_usage_errors_exit_1(tmp_path):
    assert run_cli() == 1
    assert run_cli("bogus") == 1
    assert run_cli("generate") == 1
    assert run_cli("generate", "-o", tmp_path / "x", "--joints", 13) == 1
    assert run_cli("report", tmp_path / "r", "--cardinalities", "a,b") == 1
    assert run_cli("split", tmp_path / "missing.jsonl", "--body-model", "builtin:hdm05-12", "-o", tmp_path / "f") == 1


def test_data_errors_exit_2(tmp_path, data):
    path, bm = data
    broken = tmp_path / "broken.jsonl"
    broken.write_text('{"id": "a"}\n')
    assert run_cli("split", broken, "--body-model", bm, "-o", tmp_path / "f.csv") == 2
    assert run_cli("generate", "-o", tmp_path / "x", "--classes", 1) == 2
    assert run_cli("preprocess", path, "--body-model", bm, "--technique", "{not json", "-o", tmp_path / "p") == 2
    bad_cfg = tmp_path / "cfg.json"
    bad_cfg.write_text(json.dumps({**tiny_config(tmp_path), "extra": 1}))
    assert run_cli("run", bad_cfg) == 2
    fmt = tiny_config(tmp_path, techniques=[
        {"id": "a", "norm": "pos"},
        {"id": "b", "norm": "pos", "train_aug": {"kind": "bodymodel", "subset_name": "bm12"},
         "test_aug": {"kind": "bodymodel", "subset_name": "bm12"}},
    ], body_model="builtin:hdm05-31")
    bad_cfg.write_text(json.dumps(fmt))
    assert run_cli("allinone", bad_cfg, "--techniques", "a,b") == 2


def test_divergence_exits_3(tmp_path):
    bm = builtin_body_model("hdm05-12")
    save_body_model(bm, tmp_path / "bm.json")
    rng = np.random.default_rng(0)
    huge = [Action(f"a{i}", rng.normal(size=(3, 12, 3)) * 10.0 ** (150 * (1 - i)), 12.0, f"c{i}") for i in range(2)]
    save_dataset(huge, tmp_path / "huge.jsonl")
    with np.errstate(all="ignore"):
        code = run_cli("train", tmp_path / "huge.jsonl", "--body-model", tmp_path / "bm.json",
                       "--technique", '{"id": "raw"}', "--downsample", 1, "--epochs", 5, "--lr", 1e150,
                       "--optimizer", "sgd", "--batch-size", 1, "--embed", 4, "--hidden", 8, "-o", tmp_path / "m.npz")
    assert code == 3


def test_cache_errors_exit_4(tmp_path):
    doc = tiny_config(tmp_path)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(doc))
    assert run_cli("run", cfg) == 0
    run1 = tmp_path / "results" / "cache" / "run1"
    run2 = tmp_path / "results" / "cache" / "run2"
    other = tmp_path / "other.jsonl"
    from skelfusion.synthetic import SyntheticSpec, generate_synthetic

    save_dataset(generate_synthetic(SyntheticSpec(classes=2, actions_per_class=2, min_length=5, max_length=5)), other)
    assert run_cli("fuse", run1, run2, "-o", tmp_path / "f", "--dataset", other,
                   "--body-model", "builtin:hdm05-12") == 4
    victim = run1 / "POS.csv"
    victim.write_text(victim.read_text().replace("class_00", "class_01"))
    assert run_cli("fuse", run1, run2, "-o", tmp_path / "f") == 4
    assert run_cli("fuse", tmp_path, "-o", tmp_path / "f") == 4


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "skelfusion.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "generate" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "skelfusion.cli", "nope"], capture_output=True, text=True)
    assert proc.returncode == 1
