import json
import re

import pytest

from segrobust import config as C
from segrobust.attack import evaluate_robustness
from segrobust.cli import main
from segrobust.data import read_dataset
from segrobust.model import load_model

TINY = {
    "data": {"train_count": 6, "val_count": 3, "height": 16, "width": 16},
    "model": {"depth": 1, "base_channels": 2},
    "train": {"epochs": 1},
    "sweeps": [{"name": "one", "kind": "pixel-count-fixed", "value": 0.2, "counts": [1, 3]}],
}


@pytest.fixture
def tiny_file(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture
def workspace(tmp_path, tiny_file):
    assert main(["gen-data", "--config", str(tiny_file), "--out", str(tmp_path / "d"), "--seed", "3"]) == 0
    assert main(["train", "--config", str(tiny_file), "--data", str(tmp_path / "d"), "--loss", "dice(eps=1e-6)", "--out", str(tmp_path / "m.srun")]) == 0
    return tmp_path


def test_defaults_validate_clean():
    assert C.validate(C.defaults()) == []


def test_k_zero_message():
    _, errors = C.resolve(None, [("attack.k", "0")])
    assert errors == ["attack.k: must be ≥ 1"]


def test_all_violations_reported():
    _, errors = C.resolve({"attack": {"k": 0}, "train": {"epochs": 0}, "bogus": 1})
    assert set(errors) == {"attack.k: must be ≥ 1", "train.epochs: must be an integer >= 1", "bogus: unknown key"}
    for line in errors:
        assert re.match(r"^[\w.\[\]]+: .+$", line)


def test_precedence_flags_over_file():
    cfg, errors = C.resolve({"train": {"epochs": 7}}, [("epochs", "9")])
    assert errors == [] and cfg["train"]["epochs"] == 9
    cfg, _ = C.resolve({"train": {"epochs": 7}})
    assert cfg["train"]["epochs"] == 7


def test_config_hash_ignores_output_location():
    a, b = C.defaults(), C.defaults()
    b["output_dir"], b["threads"] = "elsewhere", 4
    assert C.config_hash(a) == C.config_hash(b)
    b["seed"] = 1
    assert C.config_hash(a) != C.config_hash(b)


def test_dry_run(tiny_file, capsys):
    assert main(["protocol", "--config", str(tiny_file), "--dry-run"]) == 0
    assert main(["attack", "--model", "m", "--data", "d", "--k", "0", "--dry-run"]) == 1
    assert "attack.k: must be ≥ 1" in capsys.readouterr().err


def test_usage_errors(capsys):
    assert main(["frobnicate"]) == 1
    assert main(["train", "--data", "d"]) == 1
    assert "--out" in capsys.readouterr().err
    assert main(["eval", "--model", "m", "--data", "d", "stray"]) == 1
    assert main(["eval", "--model", "m", "--data", "d", "--nope.key", "1"]) == 1
    assert main(["attack", "--model", "m", "--data", "d", "--random", "x"]) == 1
    assert main(["eval", "--model", "m", "--data", "d", "--config", "/nonexistent.json"]) == 1


def test_runtime_failure_exit_code(tmp_path):
    assert main(["eval", "--model", str(tmp_path / "missing.srun"), "--data", str(tmp_path)]) == 2


def test_label_plumbing(workspace, capsys):
    assert load_model(workspace / "m.srun").label == "dice(eps=1e-6)"


def test_attack_matches_library(workspace, capsys):
    capsys.readouterr()
    assert main(["attack", "--model", str(workspace / "m.srun"), "--data", str(workspace / "d"), "--k", "5", "--fixed", "0.2"]) == 0
    line = capsys.readouterr().out
    clean, attacked = (float(v) for v in re.findall(r"mean Dice ([0-9.]+)", line))
    assert main(["eval", "--model", str(workspace / "m.srun"), "--data", str(workspace / "d")]) == 0
    assert float(re.search(r"mean Dice ([0-9.]+)", capsys.readouterr().out).group(1)) == clean
    cfg, _ = C.resolve(None, [("attack.k", "5")])
    res = evaluate_robustness(load_model(workspace / "m.srun"), read_dataset(workspace / "d" / "val"), C.attack_config(cfg, 0))
    assert f"{res.clean_mean:.6f}" == f"{clean:.6f}" and f"{res.mean:.6f}" == f"{attacked:.6f}"


def test_saliency_and_sweep_commands(workspace, tiny_file):
    model, data = str(workspace / "m.srun"), str(workspace / "d")
    assert main(["saliency", "--model", model, "--data", data, "--out", str(workspace / "sal"), "--index", "0"]) == 0
    assert len(list((workspace / "sal").glob("*.pgm"))) == 1
    assert main(["sweep", "--config", str(tiny_file), "--model", model, "--data", data, "--out", str(workspace / "sw")]) == 0
    assert (workspace / "sw" / "one.csv").is_file() and (workspace / "sw" / "one.svg").is_file()
    assert main(["sweep", "--config", str(tiny_file), "--model", model, "--data", data, "--out", str(workspace / "sw"), "--sweep", "nope"]) == 1


def test_inputs_not_mutated(workspace):
    before = {p: p.read_bytes() for p in (workspace / "d").rglob("*") if p.is_file()}
    before[workspace / "m.srun"] = (workspace / "m.srun").read_bytes()
    main(["attack", "--model", str(workspace / "m.srun"), "--data", str(workspace / "d"), "--random", "0,1", "--iterations", "2"])
    assert all(p.read_bytes() == b for p, b in before.items())


def test_random_seed_is_reported(tiny_file, capsys):
    assert main(["protocol", "--config", str(tiny_file), "--seed", "random", "--dry-run"]) == 0
    assert re.match(r"seed: \d+", capsys.readouterr().out)


def test_protocol_twice_identical_csv(tmp_path, tiny_file):
    for name in ("a", "b"):
        assert main(["protocol", "--config", str(tiny_file), "--seed", "42", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a/curves/one.csv").read_bytes() == (tmp_path / "b/curves/one.csv").read_bytes()


def test_output_env_default(tmp_path, tiny_file, monkeypatch):
    monkeypatch.setenv("SEGROBUST_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["gen-data", "--config", str(tiny_file)]) == 0
    assert (tmp_path / "env" / "data" / "train" / "manifest.json").is_file()
