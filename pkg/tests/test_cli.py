import json
import subprocess
import sys

import numpy as np
import pytest

from sdrkit.cli import EXIT_CONFIG, EXIT_OK, EXIT_UNRELIABLE, main
from sdrkit.fileio import read_csv, read_matrix, read_pair


@pytest.fixture
def linear_data(tmp_path):
    for name, seed in (("train", 1), ("test", 2)):
        assert main(["generate", "--kind", "linear", "--n-x", "40", "--t", "200",
                     "--seed", str(seed), "--out", str(tmp_path / name)]) == EXIT_OK
    return tmp_path


def test_generate_writes_pair(linear_data):
    pair = read_pair(linear_data / "train")
    assert pair.x.shape == (200, 40) and pair.y.shape == (200, 40)
    assert pair.provenance["generator"]


def test_generate_gaussian_metadata(tmp_path):
    assert main(["generate", "--kind", "gaussian", "--k", "3", "--mi", "1.5", "--n", "500",
                 "--copies", "2", "--csv", "--out", str(tmp_path)]) == EXIT_OK
    pair = read_pair(tmp_path)
    assert pair.x.shape == (500, 6)
    assert pair.true_mi == pytest.approx(1.5)
    assert np.loadtxt(tmp_path / "x.csv", delimiter=",").shape == (500, 6)


def test_reduce_and_evaluate(linear_data, capsys):
    basis = linear_data / "basis"
    assert main(["reduce", "--data", str(linear_data / "train"), "--method", "rcca",
                 "--k", "2", "--out", str(basis)]) == EXIT_OK
    w_x, meta = read_matrix(basis / "w_x")
    assert w_x.shape == (40, 2) and meta["method"] == "rcca"
    out = linear_data / "eval"
    assert main(["evaluate", "--data", str(linear_data / "test"), "--basis", str(basis),
                 "--train", str(linear_data / "train"), "--k-grid", "1,2,3", "--mi",
                 "--trials", "3", "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "rc_report.json").read_text())
    assert report["rc_prime"] == pytest.approx(report["rc"] - report["rc0"])
    columns, rows = read_csv(out / "diagnostic.csv")
    assert columns == ["k", "rc_prime_pca", "rc_prime_rcca", "rc0", "rc0_std"]
    assert [r["k"] for r in rows] == [1, 2, 3]
    assert "gaussian_mi" in json.loads((out / "evaluate.json").read_text())


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SDRKIT_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["generate", "--kind", "gaussian", "--k", "2", "--n", "100"]) == EXIT_OK
    assert (tmp_path / "env" / "data" / "x.bin").exists()


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["reduce", "--data", str(tmp_path / "missing"), "--method", "pca",
                 "--k", "1"]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"kind": "linear", "axes": {"t": []}}))
    assert main(["sweep", "--config", str(bad), "--out", str(tmp_path / "s")]) == EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


def test_evaluate_needs_something(linear_data):
    assert main(["evaluate", "--data", str(linear_data / "test"),
                 "--out", str(linear_data / "e")]) == EXIT_CONFIG


def test_sweep_command(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"kind": "linear", "generator": {"n": 20, "t": 80},
                               "axes": {"gamma_shared": [1.0, 4.0]}, "trials": 2,
                               "rc0_trials": 2}))
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s"),
                 "--trials", "1"]) == EXIT_OK
    columns, rows = read_csv(tmp_path / "s" / "results.csv")
    assert "rc_prime" in columns
    assert sum(r["row_type"] == "trial" for r in rows) == 4
    assert (tmp_path / "s" / "results.json").exists()


def test_mi_command(tmp_path):
    data = tmp_path / "g"
    main(["generate", "--kind", "gaussian", "--k", "2", "--mi", "1.0", "--n", "600",
          "--out", str(data)])
    out = tmp_path / "mi"
    assert main(["mi", "--data", str(data), "--kz-grid", "1,2", "--repeats", "1",
                 "--epochs", "1", "--hidden-width", "8", "--batch", "64",
                 "--out", str(out)]) == EXIT_OK
    columns, rows = read_csv(out / "sweep.csv")
    assert columns == ["k_z", "n", "seed", "reported_mi", "step_of_max_test"]
    assert [r["k_z"] for r in rows] == [1, 2]


def test_ib_command(tmp_path):
    data = tmp_path / "g"
    main(["generate", "--kind", "gaussian", "--k", "2", "--mi", "1.0", "--n", "400",
          "--out", str(data)])
    out = tmp_path / "ib"
    assert main(["ib", "--preset", "dvsib", "--data", str(data), "--epochs", "2",
                 "--hidden", "8", "--critic-hidden", "8", "--batch", "32",
                 "--out", str(out)]) == EXIT_OK
    columns, rows = read_csv(out / "trace.csv")
    assert columns == ["epoch", "train_mi", "test_mi", "loss"] and len(rows) == 2
    assert read_matrix(out / "embedding_Zx")[0].shape == (400, 2)
    assert (out / "checkpoint.bin").exists()


def test_guidelines_exit_codes(tmp_path):
    data = tmp_path / "g"
    main(["generate", "--kind", "gaussian", "--k", "3", "--mi", "2.0", "--n", "3000",
          "--copies", "4", "--out", str(data)])
    assert main(["guidelines", "--data", str(data), "--linear-k-grid", "1,2,3,6,12",
                 "--out", str(tmp_path / "gl")]) == EXIT_OK
    report = json.loads((tmp_path / "gl" / "report.json").read_text())
    assert report["method"] == "rcca"

    rng = np.random.default_rng(0)
    from sdrkit.datagen import DataMatrixPair
    from sdrkit.fileio import write_pair

    # A nonlinear pair whose tiny neural budget cannot give a stable plateau.
    s = rng.standard_normal((600, 1))
    write_pair(tmp_path / "nl", DataMatrixPair(np.hstack([np.sin(3 * s), s**2]),
                                               np.hstack([np.cos(3 * s), np.abs(s)])))
    code = main(["guidelines", "--data", str(tmp_path / "nl"), "--linear-k-grid", "1,2",
                 "--kz-grid", "1,2", "--seeds", "2", "--epochs", "1", "--hidden-width", "4",
                 "--batch", "64", "--out", str(tmp_path / "gl2")])
    verdict = json.loads((tmp_path / "gl2" / "report.json").read_text())["verdict"]
    assert code == (EXIT_UNRELIABLE if verdict == "unreliable" else EXIT_OK)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "sdrkit", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0
    for cmd in ("generate", "reduce", "evaluate", "mi", "ib", "sweep", "guidelines", "dynamics"):
        assert cmd in res.stdout
