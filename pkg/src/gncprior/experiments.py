"""Scripted experiments writing CSV/PGM/JSON artifacts.

Each experiment takes a JSON-style parameter dict and an output directory;
:func:`run` dispatches by name.  Unknown parameters are rejected so typos
do not silently fall back to defaults.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gmm as gmm_mod
from .foe import FoEModel, export_params, load_model, save_model
from .gnc import GMMFamily, rate_grid
from .io import emit_csv, load_pgm, save_pgm
from .solvers import (PSNR_CAP, FidelityTerm, VNParams, best_linear_schedule, denoising_task,
                      inpainting_task, joint_energy, joint_minimize, linear_schedule, psnr,
                      scheduled_solve, vn_forward, vn_train)
from .spline import SplineGrid
from .training import (PatchCorpus, ScoreRecoveryConfig, TrainConfig, make_rng, train,
                       train_1d_score_recovery)

__all__ = ["EXPERIMENTS", "ExperimentSpec", "run", "global_minimizer"]

EXPERIMENTS = ("gmm-sweep", "gnc-rate", "train", "score-recovery", "solve", "vn-train",
               "export-params")


@dataclass
class ExperimentSpec:
    name: str
    parameters: dict = field(default_factory=dict)
    output_dir: str | Path = "."

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.name!r}; choose from {', '.join(EXPERIMENTS)}")
        if not isinstance(self.parameters, dict):
            raise ValueError("parameters must be a JSON object")


def _take(params: dict, defaults: dict) -> dict:
    unknown = set(params) - set(defaults)
    if unknown:
        raise ValueError(f"unknown parameters: {sorted(unknown)}")
    return {**defaults, **params}


def _mixture(doc):
    return gmm_mod.five_mode_mixture() if doc is None else gmm_mod.GaussianMixture.from_dict(doc)


def _write_json(doc, path):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(json.dumps(doc, indent=2))
    tmp.replace(path)
    return path


def global_minimizer(mix, t: float, lower: float, upper: float, n: int = 200_001) -> float:
    """Dense-grid minimiser of a 1D smoothed mixture energy."""
    xs = np.linspace(lower, upper, n)
    f, _, _ = gmm_mod.energy_batch(mix, xs, t, hessian=False)
    return float(xs[np.argmin(f)])


def _gmm_sweep(p, out):
    p = _take(p, {"mixture": None, "lower": -3.0, "upper": 3.0, "points_per_axis": 2001,
                  "t_candidates": None})
    mix = _mixture(p["mixture"])
    lo = np.full(mix.dim, p["lower"]) if np.isscalar(p["lower"]) else p["lower"]
    hi = np.full(mix.dim, p["upper"]) if np.isscalar(p["upper"]) else p["upper"]
    rep = gmm_mod.convexity_report(mix, lo, hi, p["points_per_axis"], p["t_candidates"])
    emit_csv(rep.curve, ("t", "min_curvature"), out / "convexity.csv")
    _write_json({"bound_t": rep.bound_t, "numeric_t": rep.numeric_t, "grid": rep.grid_spec},
                out / "summary.json")
    return {"bound_t": rep.bound_t, "numeric_t": rep.numeric_t}


def _gnc_rate(p, out):
    p = _take(p, {"mixture": None, "t0": [1e-4, 1e-2, 1e-1, 1.0], "steps": [1, 10, 100],
                  "t_min": 1e-4, "n_starts": 1000, "domain": [-3.0, 3.0], "target": None,
                  "tol": 0.1, "eta": 1.0})
    mix = _mixture(p["mixture"])
    target = p["target"]
    if target is None:
        target = global_minimizer(mix, p["t_min"], *p["domain"])
    rows = rate_grid(GMMFamily(mix), p["t0"], p["steps"], t_min=p["t_min"],
                     n_starts=p["n_starts"], domain=tuple(p["domain"]), target=target,
                     tol=p["tol"], eta=p["eta"])
    emit_csv(rows, ("t0", "I", "rate"), out / "rates.csv")
    return {"target": target, "rows": len(rows)}


_MODEL_KEYS = {"corpus": None, "depth": 1, "channels": 48, "n_x": 63, "n_t": 16,
               "init_model": None}


def _train(p, out, seed):
    tc_keys = {f: getattr(TrainConfig(), f) for f in TrainConfig().to_dict()}
    p = _take(p, {**_MODEL_KEYS, **tc_keys})
    if seed is not None:
        p["seed"] = seed
    if p["corpus"] is None:
        raise ValueError("train needs a 'corpus' directory of PGM files")
    cfg = TrainConfig.from_dict({k: p[k] for k in tc_keys})
    if p["init_model"] is not None:
        model = load_model(p["init_model"])
    else:
        grid = SplineGrid(p["n_x"], p["n_t"], (cfg.t_hat_min, cfg.t_hat_max))
        model = FoEModel.create(p["depth"], p["channels"], grid, seed=cfg.seed)
    corpus = PatchCorpus.from_dir(p["corpus"])
    _write_json(p, out / "config.json")
    res = train(model, corpus, cfg, trace_path=out / "trace.csv",
                checkpoint_path=out / "model.json")
    save_model(model, out / "model.json")
    return {"final_loss": res.trace[-1][1], "iterations": len(res.trace)}


def _score_recovery(p, out, seed):
    p = _take(p, {"mixture": None, **{k: v for k, v in vars(ScoreRecoveryConfig()).items()
                                      if k != "train"}, "train": None})
    if seed is not None:
        p["seed"] = seed
    mix = _mixture(p.pop("mixture"))
    cfg = ScoreRecoveryConfig.from_dict(p)
    model, rep = train_1d_score_recovery(mix, cfg)
    emit_csv([(t, math.log(t), rep[t]) for t in cfg.eval_t], ("t", "t_hat", "relative_error"),
             out / "score_error.csv")
    save_model(model, out / "model.json")
    return {str(t): rep[t] for t in cfg.eval_t}


def _task_fidelity(task, clean, rng):
    kind = task.get("kind")
    if kind == "denoise":
        return denoising_task(clean, float(task.get("sigma", 0.1)), rng)
    if kind == "inpaint":
        return inpainting_task(clean, float(task.get("missing", 0.8)), rng)
    raise ValueError(f"task kind must be 'denoise' or 'inpaint', got {kind!r}")


def _solve(p, out, seed):
    p = _take(p, {"model": None, "task": None, "input": None})
    for key in ("model", "task", "input"):
        if p[key] is None:
            raise ValueError(f"solve needs --{key}")
    model = load_model(p["model"])
    task = p["task"] if isinstance(p["task"], dict) else json.loads(Path(p["task"]).read_text())
    task = _take(task, {"kind": None, "sigma": 0.1, "missing": 0.8, "seed": 0,
                        "solver": "scheduled", "t_hat0": None, "steps": 30, "eta": 1.0,
                        "vn": None})
    if seed is not None:
        task["seed"] = seed
    clean = load_pgm(p["input"])
    fid = _task_fidelity(task, clean, make_rng(task["seed"]))
    lo, hi = model.t_range
    t0 = hi if task["t_hat0"] is None else float(task["t_hat0"])
    rows = []

    def record(i, x, th):
        rows.append((i, joint_energy(model, fid, x, th), min(psnr(x, clean), PSNR_CAP), th))

    if task["solver"] == "scheduled":
        x = scheduled_solve(model, fid, fid.z, linear_schedule(t0, lo, task["steps"], task["eta"]),
                            callback=record)
    elif task["solver"] == "joint":
        x, trace = joint_minimize(model, fid, fid.z, t0, task["eta"], task["steps"])
        rows = [(i, e, float("nan"), th) for i, (e, th) in enumerate(trace)]
        rows[-1] = (rows[-1][0], rows[-1][1], min(psnr(x, clean), PSNR_CAP), rows[-1][3])
    elif task["solver"] == "vn":
        if task["vn"] is None:
            raise ValueError("the vn solver needs a 'vn' parameter file")
        vn = VNParams.from_dict(json.loads(Path(task["vn"]).read_text()))
        x = vn_forward(model, vn, fid)
        rows = [(vn.steps, joint_energy(model, fid, x, lo), min(psnr(x, clean), PSNR_CAP), lo)]
    else:
        raise ValueError(f"unknown solver {task['solver']!r}")
    save_pgm(fid.z, out / "observation.pgm")
    save_pgm(x, out / "restored.pgm")
    emit_csv(rows, ("step", "energy", "psnr", "t_hat"), out / "steps.csv")
    return {"psnr_observation": min(psnr(fid.z, clean), PSNR_CAP),
            "psnr_restored": min(psnr(x, clean), PSNR_CAP)}


def make_pairs(images, task, seed, crop=None):
    """``(clean, fidelity)`` pairs with one seeded degradation per image."""
    rng = make_rng(seed)
    pairs = []
    for im in images:
        if crop is not None and min(im.shape) > crop:
            i = rng.integers(im.shape[0] - crop + 1)
            j = rng.integers(im.shape[1] - crop + 1)
            im = im[i:i + crop, j:j + crop]
        pairs.append((im, _task_fidelity(task, im, rng)))
    return pairs


def _vn_train(p, out, seed):
    p = _take(p, {"model": None, "images": None, "kind": "denoise", "sigma": 0.1,
                  "missing": 0.8, "steps": 30, "epochs": 60, "lr": 1e-2, "n_train": 4,
                  "crop": 48, "seed": 0, "t_hat0_grid": None, "eta_grid": [0.25, 0.5, 1.0, 2.0],
                  "patience": 15})
    if seed is not None:
        p["seed"] = seed
    if p["model"] is None or p["images"] is None:
        raise ValueError("vn-train needs 'model' and 'images'")
    model = load_model(p["model"])
    files = sorted(Path(p["images"]).glob("*.pgm"))
    if len(files) < 2:
        raise ValueError("vn-train needs at least two images (training and validation)")
    task = {"kind": p["kind"], "sigma": p["sigma"], "missing": p["missing"]}
    pairs = make_pairs([load_pgm(f) for f in files], task, p["seed"], p["crop"])
    n_train = min(p["n_train"], len(pairs) - 1)
    tr, val = pairs[:n_train], pairs[n_train:]
    init, table = best_linear_schedule(model, tr, p["steps"], p["t_hat0_grid"], p["eta_grid"])
    res = vn_train(model, tr, val, init, p["epochs"], p["lr"], p["patience"])
    emit_csv(table, ("t_hat0", "eta", "mse"), out / "fixed_schedules.csv")
    emit_csv(res.history, ("epoch", "train_mse", "val_mse"), out / "history.csv")
    emit_csv([(i, th, e) for i, (th, e) in enumerate(zip(res.params.t_hats, res.params.etas))],
             ("step", "t_hat", "eta"), out / "schedule.csv")
    _write_json(res.params.to_dict(), out / "vn.json")
    return {"val_mse_init": res.history[0][2], "val_mse_best": min(h[2] for h in res.history)}


def _export(p, out):
    p = _take(p, {"model": None, "n_x": 141, "n_t": 5})
    if p["model"] is None:
        raise ValueError("export-params needs --model")
    files = export_params(load_model(p["model"]), out, p["n_x"], p["n_t"])
    return {"files": len(files)}


def run(spec: ExperimentSpec, seed: int | None = None) -> dict:
    """Run one experiment, writing its artifacts under ``spec.output_dir``."""
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = dict(spec.parameters)
    if spec.name == "gmm-sweep":
        summary = _gmm_sweep(p, out)
    elif spec.name == "gnc-rate":
        summary = _gnc_rate(p, out)
    elif spec.name == "train":
        summary = _train(p, out, seed)
    elif spec.name == "score-recovery":
        summary = _score_recovery(p, out, seed)
    elif spec.name == "solve":
        summary = _solve(p, out, seed)
    elif spec.name == "vn-train":
        summary = _vn_train(p, out, seed)
    else:
        summary = _export(p, out)
    _write_json({"experiment": spec.name, "seed": seed, "summary": summary},
                out / "run.json")
    return summary
