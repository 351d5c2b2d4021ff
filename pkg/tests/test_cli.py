import json

import numpy as np
import pytest

from ucgsd.cli import ExperimentConfig, main

CANON_2X2 = "2 2\n1 2\n3 4\n"


def write_config(path, **overrides):
    cfg = {
        "seed": 3,
        "task": "synthetic_regression",
        "architecture": {"input": 4, "hidden": [8, 8], "output": 2},
        "optimizer": {"kind": "ucgsd", "eta": 0.02},
        "steps": 20,
        "batch_size": 16,
        "log_range": 2.0,
    }
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return str(path)


def parse_canon(text):
    blocks = text.strip().split("\n\n")
    d, wp, e = (np.array([ln.split() for ln in b.splitlines()[1:]], dtype=float) for b in blocks[:3])
    return d[0], wp, e[0], blocks[3]


def test_canon_output(tmp_path, capsys):
    f = tmp_path / "w.txt"
    f.write_text(CANON_2X2)
    assert main(["canon", str(f), "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    d, wp, e, summary = parse_canon(out)
    np.testing.assert_allclose(d[:, None] * wp * e[None, :], [[1, 2], [3, 4]], rtol=1e-14)
    np.testing.assert_allclose(np.abs(wp).prod(axis=1), 1.0, rtol=1e-14)
    assert summary.startswith("residual=") and "iters=" in summary
    assert (tmp_path / "o" / "canon.txt").read_text() == out


def test_canon_power_of_two_example(tmp_path, capsys):
    f = tmp_path / "w.txt"
    f.write_text("2 2\n1 2\n4 8\n")
    assert main(["canon", str(f)]) == 0
    d, wp, e, _ = parse_canon(capsys.readouterr().out)
    np.testing.assert_allclose(d, [2 ** -0.25, 2 ** 1.75], rtol=1e-14)
    np.testing.assert_allclose(wp, np.ones((2, 2)), rtol=1e-14)
    np.testing.assert_allclose(e, [2 ** 0.25, 2 ** 1.25], rtol=1e-14)


def test_canon_identity(tmp_path, capsys):
    f = tmp_path / "w.txt"
    f.write_text("3 3\n1 0 0\n0 1 0\n0 0 1\n")
    assert main(["canon", str(f)]) == 0
    d, wp, e, _ = parse_canon(capsys.readouterr().out)
    np.testing.assert_array_equal(d, 1.0)
    np.testing.assert_array_equal(wp, np.eye(3))


@pytest.mark.parametrize("text,code", [
    ("2 2\n1 2\n3\n", 2),
    ("2 2\n1 2\n3 nan\n", 2),
    ("2 2\n0 0\n0 0\n", 3),
])
def test_canon_exit_codes(tmp_path, text, code):
    f = tmp_path / "w.txt"
    f.write_text(text)
    assert main(["canon", str(f)]) == code


def test_canon_convergence_failure(tmp_path):
    f = tmp_path / "w.txt"
    f.write_text("3 3\n1 5 0\n0 2 7\n3 0 1\n")
    assert main(["canon", str(f), "--max-iter", "1", "--tol", "1e-300"]) == 4


def test_missing_file_and_bad_args(tmp_path):
    assert main(["canon", str(tmp_path / "nope.txt")]) == 2
    assert main(["train"]) == 2
    assert main(["frobnicate"]) == 2


def test_unknown_config_key(tmp_path):
    cfg = write_config(tmp_path / "c.json", learning_rate=0.1)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 2
    cfg = write_config(tmp_path / "c.json", optimizer={"kind": "ucgsd", "lr": 0.1})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 2
    cfg = write_config(tmp_path / "c.json", task="mnist")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 2


def test_train_writes_csv_and_dump(tmp_path):
    cfg = write_config(tmp_path / "c.json", steps=30)
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    lines = (out / "train.csv").read_text().splitlines()
    assert lines[0].startswith("# config_sha256=")
    assert lines[1] == "step,loss,grad_norm"
    assert len(lines) == 32
    losses = [float(ln.split(",")[1]) for ln in lines[2:]]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])
    assert (out / "final" / "network.json").exists()


def test_train_500_steps_reduces_loss(tmp_path):
    cfg = write_config(tmp_path / "c.json", steps=500)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    rows = (tmp_path / "r" / "train.csv").read_text().splitlines()[2:]
    assert float(rows[-1].split(",")[1]) < float(rows[0].split(",")[1])


def test_train_zero_steps(tmp_path):
    cfg = write_config(tmp_path / "c.json", steps=0)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    assert len((tmp_path / "r" / "train.csv").read_text().splitlines()) == 2


def test_train_divergence_exit(tmp_path):
    cfg = write_config(tmp_path / "c.json", optimizer={"kind": "sgd", "eta": 50.0}, steps=200,
                       architecture={"input": 4, "hidden": [], "output": 2})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 4


def test_two_moons(tmp_path):
    cfg = write_config(tmp_path / "c.json", task="two_moons",
                       architecture={"input": 2, "hidden": [16], "output": 2},
                       optimizer={"kind": "uc_adam", "eta": 0.01}, steps=200)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    rows = (tmp_path / "r" / "train.csv").read_text().splitlines()[2:]
    assert float(rows[-1].split(",")[1]) < float(rows[0].split(",")[1])


@pytest.mark.parametrize("cmd,csv", [
    ("train", "train.csv"),
    ("equivariance-check", "equiv.csv"),
    ("gradcheck", "gradcheck.csv"),
])
def test_determinism(tmp_path, cmd, csv):
    cfg = write_config(tmp_path / "c.json", architecture={"input": 4, "hidden": [6], "output": 2, "bias": True})
    outs = []
    for run in ("a", "b"):
        assert main([cmd, "--config", cfg, "--out", str(tmp_path / run)]) == 0
        outs.append((tmp_path / run / csv).read_bytes())
    assert outs[0] == outs[1]
    assert main([cmd, "--config", cfg, "--seed", "99", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / csv).read_bytes() != outs[0]


def test_equivariance_pass(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", steps=50,
                       architecture={"input": 4, "hidden": [8, 8], "output": 2, "bias": True})
    assert main(["equivariance-check", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")
    rows = (tmp_path / "equiv.csv").read_text().splitlines()
    assert rows[1] == "step,max_weight_dev,loss_gap"
    assert max(float(r.split(",")[1]) for r in rows[2:]) <= 1e-6


def test_equivariance_baseline_reports(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", optimizer={"kind": "sgd", "eta": 0.02}, log_range=3.0)
    assert main(["equivariance-check", "--config", cfg, "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "baseline" in out and "PASS" not in out


def test_equivariance_trivial_gauge(tmp_path):
    cfg = write_config(tmp_path / "c.json", optimizer={"kind": "sgd", "eta": 0.02}, log_range=0.0)
    assert main(["equivariance-check", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "equiv.csv").read_text().splitlines()[2:]
    assert all(float(r.split(",")[1]) == 0.0 for r in rows)


def test_gradcheck_pass_and_corrupt(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", architecture={"input": 3, "hidden": [5], "output": 2, "bias": True})
    assert main(["gradcheck", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")
    assert main(["gradcheck", "--config", cfg, "--out", str(tmp_path / "b"), "--corrupt-gradient"]) == 1
    assert capsys.readouterr().out.strip().endswith("FAIL")


def test_gradcheck_thread_count_invariance(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.json")
    outs = []
    for threads in ("1", "4"):
        monkeypatch.setenv("UC_GRAD_THREADS", threads)
        assert main(["gradcheck", "--config", cfg, "--out", str(tmp_path / threads)]) == 0
        outs.append((tmp_path / threads / "gradcheck.csv").read_bytes())
    assert outs[0] == outs[1]


def test_config_digest_and_seeds(tmp_path):
    a = ExperimentConfig.load(write_config(tmp_path / "a.json"))
    b = ExperimentConfig.load(write_config(tmp_path / "b.json", seed=4))
    assert a.digest() != b.digest()
    assert len(set(a.seeds())) == 4
    assert a.seeds() == ExperimentConfig.load(write_config(tmp_path / "c.json")).seeds()
