import json
import subprocess
import sys

import numpy as np
import pytest

from ulab.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, main
from ulab.umds import load_external_dataset


def _run(tmp_path, cmd, cfg, out, seed=0, extra=()):
    path = tmp_path / f"{cmd}-{out}.json"
    path.write_text(json.dumps(cfg))
    return main([cmd, "--config", str(path), "--seed", str(seed), "--out", str(tmp_path / out), *extra])


def test_pipeline(tmp_path):
    mix = {"type": "mixture", "generator": "symmetric", "d": 6, "mean_norm": 1.5}
    assert _run(tmp_path, "gen", {"data": mix, "n": 3000}, "train") == EXIT_OK
    same = {"type": "mixture", "path": str(tmp_path / "train" / "mixture.json")}
    assert _run(tmp_path, "gen", {"data": same, "n": 3000}, "test", seed=1) == EXIT_OK
    train = load_external_dataset(tmp_path / "train" / "data")
    assert train.X.shape == (3000, 6) and (tmp_path / "train" / "mixture.json").exists()

    assert _run(tmp_path, "moments", {"input": str(tmp_path / "train" / "data"), "diagonal": True},
                "mom") == EXIT_OK
    assert (tmp_path / "mom" / "equivalent_gmm.json").exists()

    prob = {"loss": "logistic-binary", "lam": 0.01}
    assert _run(tmp_path, "erm", {"train": str(tmp_path / "train" / "data"), "problem": prob,
                                  "test": str(tmp_path / "test" / "data")}, "erm") == EXIT_OK
    summ = json.loads((tmp_path / "erm" / "erm_summary.json").read_text())
    assert 0 <= summ["test_error"] < 0.3 and summ["objective"] > summ["train_loss"]

    assert _run(tmp_path, "replica", {"moments": str(tmp_path / "mom" / "moments.json"), "alpha": 2.0,
                                      "loss": "logistic-binary", "lam": 0.01}, "rep") == EXIT_OK
    pred = json.loads((tmp_path / "rep" / "replica_prediction.json").read_text())
    assert 0 < pred["test_error"] < 0.5

    assert _run(tmp_path, "gen", {"data": {"type": "mixture", "path": str(tmp_path / "mom" / "equivalent_gmm.json")},
                                  "n": 3000}, "gmm", seed=2) == EXIT_OK
    assert _run(tmp_path, "clt", {"data": str(tmp_path / "test" / "data"), "gmm": str(tmp_path / "gmm" / "data"),
                                  "directions": {"random": 4, "spikes": 2,
                                                 "estimator": str(tmp_path / "erm" / "estimator.json")},
                                  "null_permutations": 5}, "clt") == EXIT_OK
    rep = json.loads((tmp_path / "clt" / "clt_report.json").read_text())
    assert len(rep["rows"]) == 2 * 7 and "null_band_w1" in rep["metadata"]

    small = {"type": "mixture", "generator": "symmetric", "d": 3}
    assert _run(tmp_path, "gen", {"data": small, "n": 30}, "small") == EXIT_OK
    g = {"train": str(tmp_path / "small" / "data"), "problem": prob,
         "gibbs": {"beta": 1.0, "n_steps": 600, "burn_in": 200}, "n_chains": 2, "dump_chain": True}
    assert _run(tmp_path, "gibbs", g, "gibbs") == EXIT_OK
    cs = json.loads((tmp_path / "gibbs" / "chain_summary.json").read_text())
    side = json.loads((tmp_path / "gibbs" / "chain.json").read_text())
    raw = np.fromfile(tmp_path / "gibbs" / "chain.f64", dtype="<f8").reshape(side["rows"], side["cols"])
    assert raw.shape == (800, 3) and np.allclose(raw.mean(0), cs["mean"])


def test_experiment_command(tmp_path):
    cfg = {"kind": "universality-curve", "data": {"type": "features", "d": 10, "p": 12},
           "problem": {"loss": "squared", "lam": 0.1}, "alpha_grid": [1.0], "n_test": 100, "seeds": 2,
           "moments_n": 1000}
    assert _run(tmp_path, "experiment", cfg, "exp", extra=("--threads", "2")) == EXIT_OK
    assert (tmp_path / "exp" / "results.csv").exists()


def test_exit_codes(tmp_path):
    assert _run(tmp_path, "experiment", {"kind": "nope", "data": {"type": "mixture"}}, "bad") == EXIT_CONFIG
    assert _run(tmp_path, "gen", {"n": 3}, "bad2") == EXIT_CONFIG
    bad = tmp_path / "broken.json"
    bad.write_text("{not json")
    assert main(["gen", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["gen", "--config", str(tmp_path / "missing.json")]) == EXIT_IO
    assert _run(tmp_path, "erm", {"train": str(tmp_path / "nowhere"), "problem": {"loss": "squared", "lam": 0.1}},
                "bad3") == EXIT_IO
    rank_poor = {"type": "mixture", "generator": "single-cluster", "d": 8,
                 "labels": {"rule": "linear-regression"}}
    assert _run(tmp_path, "gen", {"data": rank_poor, "n": 4}, "tiny") == EXIT_OK
    assert _run(tmp_path, "erm", {"train": str(tmp_path / "tiny" / "data"),
                                  "problem": {"loss": "squared", "lam": 0.0}}, "sing") == EXIT_NUMERICAL
    assert main(["gen", "--config", str(bad), "--seed", "-1"]) == EXIT_CONFIG


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "ulab.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("gen", "moments", "erm", "gibbs", "replica", "clt", "experiment"):
        assert cmd in r.stdout
