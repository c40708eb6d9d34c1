import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from dagr.cli import main
from dagr.geom import modality_set
from dagr.io import write_embedding_dump

SMALL_TRAIN = {"epochs": 3, "data": {"samples_per_class": 20}}


def write_config(path, values):
    path.write_text(yaml.safe_dump(values))
    return str(path)


def load(path):
    return json.loads(path.read_text())


def test_gradcheck_default_passes(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    res = load(tmp_path / "gradcheck.json")["results"]
    assert res["passed"] and res["max_error"] <= 1e-5
    assert "max relative error" in capsys.readouterr().out


def test_gradcheck_corrupted_gradient_fails(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", {"gradcheck": {"debug_corrupt_gradient": True}})
    assert main(["gradcheck", "--config", cfg, "--out", str(tmp_path)]) == 1


def test_config_errors_exit_2(tmp_path, capsys):
    missing = tmp_path / "absent.yaml"
    assert main(["gradcheck", "--config", str(missing), "--out", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err
    bad = write_config(tmp_path / "bad.yaml", {"tau": -1})
    assert main(["train", "--config", bad, "--out", str(tmp_path)]) == 2
    assert "tau" in capsys.readouterr().err
    unknown = write_config(tmp_path / "unk.yaml", {"momentum": 0.9})
    assert main(["train", "--config", unknown, "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize("argv", [[], ["fly"], ["train", "--threads", "0"], ["train", "--seed", "-1"],
                                  ["flow", "--dump-embeddings", "a,b"]])
def test_usage_errors_exit_2(argv):
    assert main(argv) == 2


def test_diagnose_needs_input(tmp_path):
    assert main(["diagnose", "--out", str(tmp_path)]) == 2
    assert main(["diagnose", "--input", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 1


def test_diagnose_identical_modalities(tmp_path):
    z = np.random.default_rng(0).standard_normal((10, 4))
    dump = write_embedding_dump(tmp_path / "emb.csv", modality_set([z, z.copy()], np.arange(10) % 2))
    assert main(["diagnose", "--input", str(dump), "--out", str(tmp_path)]) == 0
    res = load(tmp_path / "diagnose.json")["results"]
    assert res["cross_modal_deviation"] == 0.0
    assert res["n_samples"] == 10 and res["recall_at_k"]["1"] == 1.0


def test_zero_beta_train_artifacts_match_baseline(tmp_path):
    runs = {}
    for name, extra in (("base", {"dagr": False}), ("zero", {"dagr": True, "use_pareto": True, "beta": 0.0})):
        out = tmp_path / name
        cfg = write_config(tmp_path / f"{name}.yaml", {**SMALL_TRAIN, **extra})
        assert main(["train", "--config", cfg, "--out", str(out), "--dump-embeddings", "0,3"]) == 0
        runs[name] = out
    for artifact in ("train.csv", "train_embeddings_epoch0.csv", "train_embeddings_epoch3.csv"):
        assert (runs["base"] / artifact).read_bytes() == (runs["zero"] / artifact).read_bytes()


def test_train_rerun_from_config_echo(tmp_path):
    cfg = write_config(tmp_path / "t.yaml", {**SMALL_TRAIN, "seed": 4})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    first = load(tmp_path / "a" / "train.json")
    echo = write_config(tmp_path / "echo.yaml", first["config_echo"])
    assert main(["train", "--config", echo, "--out", str(tmp_path / "b")]) == 0
    second = load(tmp_path / "b" / "train.json")
    first.pop("started_at"), second.pop("started_at")
    assert first == second
    assert first["seed"] == 4 and first["config_echo"]["tau"] == 0.25


def test_seed_override(tmp_path):
    assert main(["train", "--config", write_config(tmp_path / "t.yaml", SMALL_TRAIN), "--seed", "9",
                 "--out", str(tmp_path)]) == 0
    assert load(tmp_path / "train.json")["seed"] == 9


def test_flow_certification_config(tmp_path):
    cfg = write_config(tmp_path / "f.yaml", {"flow": {"B": 64, "d": 8, "eta": 0.05, "steps": 2000, "init": "collapsed"}})
    assert main(["flow", "--config", cfg, "--out", str(tmp_path), "--dump-embeddings", "0,2000"]) == 0
    series = [row[0] for row in load(tmp_path / "flow.json")["results"]["eff_rank"]]
    assert series[0] < 1.05 and series[-1] > 6
    lines = (tmp_path / "flow.csv").read_text().splitlines()
    assert len(lines) == 2002 and lines[0].startswith("step,loss_total")
    assert (tmp_path / "flow_embeddings_step2000.csv").exists()


def test_threads_do_not_change_results(tmp_path):
    cfg = write_config(tmp_path / "r.yaml", {**SMALL_TRAIN, "epochs": 2, "robustness": {"seeds": [0, 1, 2]}})
    for n in ("1", "3"):
        assert main(["robustness", "--config", cfg, "--threads", n, "--out", str(tmp_path / n)]) == 0
    assert (tmp_path / "1" / "robustness.csv").read_bytes() == (tmp_path / "3" / "robustness.csv").read_bytes()
    a, b = load(tmp_path / "1" / "robustness.json"), load(tmp_path / "3" / "robustness.json")
    assert a["results"] == b["results"]
    assert set(a["results"]["summary"]) == {"dropout", "gaussian", "missing"}


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "dagr", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("dagr ")
