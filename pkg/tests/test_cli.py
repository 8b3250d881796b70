import json
import os

import numpy as np
import pytest

from eisnn.cli import EXIT_CHECK, EXIT_COLLAPSE, EXIT_OK, EXIT_USAGE, main
from eisnn.data import write_idx


@pytest.fixture
def mnist_dir(tmp_path):
    rng = np.random.default_rng(0)
    d = tmp_path / "mnist"
    d.mkdir()
    for prefix, n in (("train", 64), ("t10k", 32)):
        y = rng.integers(0, 10, n)
        img = np.zeros((n, 28, 28), dtype=np.uint8)
        for i, c in enumerate(y):               # class-dependent bright stripe
            img[i, 2 * c:2 * c + 4, :] = 255
        write_idx(str(d / f"{prefix}-images-idx3-ubyte"), img)
        write_idx(str(d / f"{prefix}-labels-idx1-ubyte"), y)
    return str(d)


def _only_run(root):
    runs = [p for p in os.listdir(root) if p != "init_stats"]
    assert len(runs) == 1
    return os.path.join(root, runs[0])


def test_train_writes_run_directory(mnist_dir, tmp_path, capsys):
    out = str(tmp_path / "runs")
    code = main(["train", "--data", mnist_dir, "--epochs", "2", "--batch-size", "16", "--out", out])
    assert code == EXIT_OK
    run = _only_run(out)
    metrics = json.load(open(os.path.join(run, "metrics.json")))["epochs"]
    assert [m["epoch"] for m in metrics] == [1, 2]
    manifest = json.load(open(os.path.join(run, "manifest.json")))
    assert {"config", "seed", "dataset_checksum", "code_version", "output_dir"} <= set(manifest)
    for sub in ("epoch_0/currents.csv", "epoch_0/grad_norms.csv", "epoch_2/currents.json",
                "init_report.json", "checkpoint.ckpt"):
        assert os.path.exists(os.path.join(run, sub)), sub
    # the manifest is never overwritten by a second identical run
    assert main(["train", "--data", mnist_dir, "--epochs", "2", "--batch-size", "16", "--out", out]) == EXIT_USAGE
    assert main(["train", "--data", mnist_dir, "--epochs", "2", "--batch-size", "16", "--out", out,
                 "--resume"]) == EXIT_OK


def test_config_precedence(mnist_dir, tmp_path, monkeypatch):
    cfg = tmp_path / "run.ini"
    cfg.write_text(f"[train]\ndata = {mnist_dir}\nepochs = 3\nlr = 0.25\nbatch_size = 16\n")
    monkeypatch.setenv("EISNN_RUN_ROOT", str(tmp_path / "env_runs"))
    assert main(["train", "--config", str(cfg), "--epochs", "2"]) == EXIT_OK
    run = _only_run(str(tmp_path / "env_runs"))
    man = json.load(open(os.path.join(run, "manifest.json")))["config"]
    assert man["epochs"] == 2 and man["lr"] == 0.25 and man["batch_size"] == 16


@pytest.mark.parametrize("argv", [
    [],
    ["train", "--data", "/definitely/missing"],
    ["train", "--stabilize", "eps=zero"],
    ["train", "--grad-scale", "maybe"],
    ["frobnicate"],
])
def test_usage_errors(argv, mnist_dir):
    if "--stabilize" in argv or "--grad-scale" in argv:
        argv = argv + ["--data", mnist_dir]
    assert main(argv) == EXIT_USAGE


def test_bad_config_key(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[train]\nlearning_rate = 1\n")
    assert main(["train", "--config", str(cfg)]) == EXIT_USAGE


def test_collapse_exit_code(mnist_dir, tmp_path):
    out = str(tmp_path / "runs")
    code = main(["train", "--data", mnist_dir, "--epochs", "2", "--batch-size", "16", "--lr", "1e12",
                 "--out", out])
    assert code == EXIT_COLLAPSE
    assert os.path.exists(os.path.join(_only_run(out), "collapse.json"))


def test_init_stats_synthetic(capsys):
    assert main(["init-stats", "--arch", "mlp:300,256,10", "--synthetic-bernoulli", "0.5",
                 "--precision", "64"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)["layers"][0]
    assert rep["lambda"] == pytest.approx(30, rel=0.01) and rep["g_I_value"] == pytest.approx(0.1, rel=0.01)
    assert rep["stats"]["balance_residual"] <= 0.05
    assert rep["stats"]["mean_I_EE"] == pytest.approx(5.0, rel=0.05)


def test_init_stats_clamps_pathological_rate(capsys):
    assert main(["init-stats", "--arch", "mlp:20,8,2", "--synthetic-bernoulli", "0.0",
                 "--samples", "50"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["layers"][0]["clamped"] and out["layers"][0]["p_hat"] == 0.01
    assert any("clamped" in w for w in out["warnings"])


def test_init_stats_on_dataset(mnist_dir, capsys):
    assert main(["init-stats", "--data", mnist_dir, "--arch", "vgg8_small:8,8", "--batch-size", "8"]) == EXIT_OK
    layers = json.loads(capsys.readouterr().out)["layers"]
    assert len(layers) == 2 and all({"lambda", "g_I_value", "p_hat"} <= set(l) for l in layers)


def test_grad_check_exit_codes(tmp_path, capsys):
    report = tmp_path / "gc.json"
    assert main(["grad-check", "--out", str(report)]) == EXIT_OK
    data = json.load(open(report))
    assert data["passed"] and set(data["errors"]) >= {"layer0.W_EE", "layer1.W_EI", "head.W"}
    assert main(["grad-check", "--corrupt-backward"]) == EXIT_CHECK
    assert "worst parameter" in capsys.readouterr().err
