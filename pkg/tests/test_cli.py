import json

import numpy as np
import pytest

from gncprior.cli import main
from gncprior.foe import FoEModel, save_model
from gncprior.io import load_pgm, read_csv, save_pgm
from gncprior.spline import SplineGrid


@pytest.fixture
def model_file(tmp_path):
    path = tmp_path / "model.json"
    save_model(FoEModel.create(depth=1, channels=4, grid=SplineGrid(15, 6)), path)
    return path


@pytest.fixture
def image_file(tmp_path):
    path = tmp_path / "clean.pgm"
    save_pgm(np.random.default_rng(0).random((12, 12)), path)
    return path


def _config(tmp_path, doc):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return str(path)


def test_gnc_rate(tmp_path, capsys):
    out = tmp_path / "rate"
    cfg = _config(tmp_path, {"n_starts": 50})
    assert main(["gnc-rate", "--config", cfg, "--out", str(out)]) == 0
    header, rows = read_csv(out / "rates.csv")
    assert header == ["t0", "I", "rate"] and len(rows) == 12
    assert json.loads(capsys.readouterr().out)["rows"] == 12
    assert json.loads((out / "run.json").read_text())["experiment"] == "gnc-rate"


def test_gmm_sweep(tmp_path):
    out = tmp_path / "sweep"
    assert main(["gmm-sweep", "--config", _config(tmp_path, {"points_per_axis": 201}),
                 "--out", str(out)]) == 0
    doc = json.loads((out / "summary.json").read_text())
    assert doc["numeric_t"] <= doc["bound_t"]


def test_export_params(tmp_path):
    out = tmp_path / "export"
    model = tmp_path / "full.json"
    save_model(FoEModel.create(depth=1), model)
    assert main(["export-params", "--model", str(model), "--out", str(out)]) == 0
    assert len(list(out.glob("*.pgm"))) == 48
    assert len(list(out.glob("*.csv"))) == 48


def test_solve_without_missing_pixels_returns_observation(tmp_path, model_file, image_file):
    out = tmp_path / "solve"
    task = _config(tmp_path, {"kind": "inpaint", "missing": 0.0, "steps": 3})
    assert main(["solve", "--model", str(model_file), "--task", task, "--input", str(image_file),
                 "--out", str(out)]) == 0
    np.testing.assert_array_equal(load_pgm(out / "restored.pgm"), load_pgm(out / "observation.pgm"))
    header, rows = read_csv(out / "steps.csv")
    assert header == ["step", "energy", "psnr", "t_hat"] and len(rows) == 4


@pytest.mark.parametrize("solver", ["scheduled", "joint"])
def test_solve_denoise(tmp_path, model_file, image_file, solver):
    out = tmp_path / solver
    task = {"kind": "denoise", "sigma": 0.1, "steps": 4, "solver": solver}
    assert main(["solve", "--model", str(model_file), "--task", _config(tmp_path, task),
                 "--input", str(image_file), "--out", str(out), "--seed", "3"]) == 0
    assert load_pgm(out / "restored.pgm").shape == (12, 12)


def test_score_recovery_cli(tmp_path):
    out = tmp_path / "score"
    cfg = _config(tmp_path, {"n_samples": 20_000, "n_x": 31, "n_t": 8, "eval_points": 101})
    assert main(["score-recovery", "--config", cfg, "--out", str(out)]) == 0
    header, rows = read_csv(out / "score_error.csv")
    assert header == ["t", "t_hat", "relative_error"] and len(rows) == 3


def test_train_and_vn_train(tmp_path, model_file):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    rng = np.random.default_rng(1)
    for i in range(3):
        save_pgm(rng.random((16, 16)), corpus / f"{i}.pgm")
    cfg = _config(tmp_path, {"depth": 1, "channels": 3, "n_x": 15, "n_t": 6, "patch_size": 8,
                             "batch_size": 2, "iterations": 3, "checkpoint_every": 2})
    assert main(["train", "--config", cfg, "--corpus", str(corpus), "--out", str(tmp_path / "t")]) == 0
    assert len(read_csv(tmp_path / "t" / "trace.csv")[1]) == 3
    vcfg = _config(tmp_path, {"steps": 2, "epochs": 2, "crop": 8, "n_train": 2,
                              "t_hat0_grid": [-2.0], "eta_grid": [1.0]})
    assert main(["vn-train", "--config", vcfg, "--model", str(tmp_path / "t" / "model.json"),
                 "--images", str(corpus), "--out", str(tmp_path / "v")]) == 0
    assert len(read_csv(tmp_path / "v" / "schedule.csv")[1]) == 2


def test_exit_codes(tmp_path, model_file, capsys):
    assert main(["gnc-rate", "--config", _config(tmp_path, {"bogus": 1}),
                 "--out", str(tmp_path / "x")]) == 2
    assert main(["train", "--out", str(tmp_path / "y")]) == 2
    assert main(["solve", "--model", str(tmp_path / "missing.json"),
                 "--task", _config(tmp_path, {"kind": "denoise"}),
                 "--input", str(tmp_path / "none.pgm"), "--out", str(tmp_path / "z")]) == 2
    with pytest.raises(SystemExit):
        main(["no-such-experiment"])
    # the five-mode energy is not convex at t = 1e-4: numerical failure, status 1
    bad = _config(tmp_path, {"t_candidates": [1e-4], "points_per_axis": 201})
    assert main(["gmm-sweep", "--config", bad, "--out", str(tmp_path / "w")]) == 1
    assert "none convex" in capsys.readouterr().err
