"""Acceptance criteria at their stated tolerances.

Each test prints one ``criterion N: PASS|FAIL`` line (also repeated in the
terminal summary) before asserting.  Criterion 6 trains the desk model
(about 15 minutes on one core); set ``GNCPRIOR_ACCEPTANCE_MODEL`` to a
saved model file to reuse one instead.  Criterion 7 runs on that model.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from gncprior.conv import conv2d, conv2d_adjoint
from gncprior.corpus import build_corpus
from gncprior.experiments import global_minimizer, make_pairs
from gncprior.foe import (FoEModel, foe_energy, foe_grad_x, foe_t_derivatives, load_model,
                          loss_backprop)
from gncprior.gmm import (GaussianMixture, convexity_report, energy_batch, five_mode_mixture)
from gncprior.gnc import GMMFamily, equally_spaced_starts, rate_grid
from gncprior.io import load_pgm
from gncprior.solvers import (FidelityTerm, VNParams, best_linear_schedule, denoising_task,
                              inpainting_task, joint_energy, joint_minimize, linear_schedule,
                              mean_psnr, prox_fidelity, psnr, scheduled_solve, vn_forward,
                              vn_loss_and_grad, vn_train)
from gncprior.spline import SplineActivation2D, SplineGrid, quartic_kernel
from gncprior.training import (PatchCorpus, ScoreRecoveryConfig, TrainConfig, loss_equivalence_check,
                               make_rng, train, train_1d_score_recovery)

from conftest import ACCEPTANCE, random_model, rel_err

pytestmark = pytest.mark.slow

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "data"
ARTIFACTS = Path(__file__).parent / ".artifacts"


def report(n, ok, detail, capsys):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# 1 ---------------------------------------------------------------------------

def test_criterion_1_convexity_bound(capsys):
    start = time.perf_counter()
    mix = five_mode_mixture()
    rep = convexity_report(mix, [-3.0], [3.0], 2001)
    xs = np.linspace(-3, 3, 2001)
    _, _, hess = energy_batch(mix, xs, rep.bound_t)
    min_curv = float(hess.reshape(-1).min())
    elapsed = time.perf_counter() - start
    ok = rep.bound_t == 16.0 and min_curv >= -1e-9 and rep.numeric_t <= 16.0 and elapsed < 1.0
    report(1, ok, f"bound t={rep.bound_t:g}, min d2F={min_curv:.4g}, numeric t={rep.numeric_t:.4g}, "
                  f"{elapsed:.2f} s", capsys)


# 2 ---------------------------------------------------------------------------

def basin_fraction(mix, t, starts, target, tol, step=5e-3, max_iter=200_000):
    """Fraction of starts that plain gradient descent on ``F(., t)`` takes to ``target``."""
    x = starts.astype(float).copy()
    for _ in range(max_iter):
        _, g, _ = energy_batch(mix, x, t, hessian=False)
        dx = step * g.reshape(-1)
        x -= dx
        if np.max(np.abs(dx)) < 1e-12:
            break
    return float(np.mean(np.abs(x - target) < tol))


def test_criterion_2_attainment_rates(capsys):
    start = time.perf_counter()
    mix = five_mode_mixture()
    target = global_minimizer(mix, 1e-4, -3.0, 3.0)
    t0s = [1e-4, 1e-2, 1e-1, 1.0]
    rows = rate_grid(GMMFamily(mix), t0s, [100], t_min=1e-4, n_starts=1000, domain=(-3.0, 3.0),
                     target=target, tol=0.1, eta=1.0)
    rate = {r[0]: r[2] for r in rows}
    basin = basin_fraction(mix, 1e-4, equally_spaced_starts(-3, 3, 1000), target, 0.1)
    elapsed = time.perf_counter() - start
    a = rate[1.0] == 1.0
    b = all(rate[u] <= rate[v] for u, v in zip(t0s, t0s[1:]))
    c = abs(rate[1e-4] - basin) <= 0.01
    ok = a and b and c and elapsed < 30
    report(2, ok, f"rate(t0=1)={rate[1.0]:g} [{'ok' if a else 'no'}], monotone "
                  f"{[rate[u] for u in t0s]} [{'ok' if b else 'no'}], rate(t0=1e-4)={rate[1e-4]:g} "
                  f"vs basin oracle {basin:g} [{'ok' if c else 'no'}], {elapsed:.1f} s", capsys)


# 3 ---------------------------------------------------------------------------

def _gmm_errors(rng):
    covs = []
    for _ in range(3):
        a = rng.standard_normal((2, 2))
        covs.append(0.05 * np.eye(2) + 0.1 * a @ a.T)
    mix = GaussianMixture(np.array([0.2, 0.3, 0.5]), rng.uniform(-1, 1, (3, 2)), np.array(covs))
    h, eg, eh = 1e-6, 0.0, 0.0
    for _ in range(20):
        x, t = rng.uniform(-2, 2, 2), rng.uniform(0.01, 1.0)
        _, g, H = energy_batch(mix, x[None], t)
        fd_g, fd_h = np.zeros(2), np.zeros((2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fp, gp, _ = energy_batch(mix, (x + e)[None], t, hessian=False)
            fm, gm, _ = energy_batch(mix, (x - e)[None], t, hessian=False)
            fd_g[k] = (fp[0] - fm[0]) / (2 * h)
            fd_h[:, k] = (gp[0] - gm[0]) / (2 * h)
        eg = max(eg, rel_err(g[0], fd_g))
        eh = max(eh, rel_err(H[0], fd_h))
    return eg, eh


def _spline_error(rng):
    grid = SplineGrid(21, 7)
    act = SplineActivation2D(grid, rng.standard_normal((grid.n_x, grid.n_t)))
    x, t = rng.uniform(-2.5, 2.5, 30), rng.uniform(-8.0, -1.0, 30)
    worst, h = 0.0, 1e-5
    for dx in range(4):
        for dt in range(4 - dx):
            if dx + dt == 0:
                continue
            if dt > 0:
                fd = (act.eval(x, t + h, dx, dt - 1) - act.eval(x, t - h, dx, dt - 1)) / (2 * h)
            else:
                fd = (act.eval(x + h, t, dx - 1, dt) - act.eval(x - h, t, dx - 1, dt)) / (2 * h)
            worst = max(worst, rel_err(act.eval(x, t, dx, dt), fd))
    return worst


def _foe_errors(rng):
    ey = et = et2 = ep = 0.0
    for depth in (1, 2, 3):
        m = random_model(depth, 8, seed=depth, grid=SplineGrid(15, 6))
        y = rng.random((12, 12))
        t = rng.uniform(-6.0, -1.0)
        g = foe_grad_x(m, y, t)
        h = 1e-5
        ana, fd = [], []
        for _ in range(10):
            i, j = rng.integers(12, size=2)
            e = np.zeros_like(y)
            e[i, j] = h
            ana.append(g[i, j])
            fd.append((foe_energy(m, y + e, t) - foe_energy(m, y - e, t)) / (2 * h))
        ey = max(ey, rel_err(ana, fd))
        ht = 1e-4
        d1, d2 = foe_t_derivatives(m, y, t)
        e0, ep_, em_ = (foe_energy(m, y, t + s) for s in (0.0, ht, -ht))
        et = max(et, rel_err(d1, (ep_ - em_) / (2 * ht)))
        et2 = max(et2, rel_err(d2, (ep_ - 2 * e0 + em_) / ht**2))
        n = rng.standard_normal((12, 12))
        _, grads = loss_backprop(m, y, n, t, 0.3)
        params = m.parameters()
        ana, fd, hp = [], [], 1e-6
        for _ in range(50):
            p = rng.integers(len(params))
            idx = tuple(rng.integers(s) for s in params[p].shape)
            orig = params[p][idx]
            params[p][idx] = orig + hp
            lp = loss_backprop(m, y, n, t, 0.3)[0]
            params[p][idx] = orig - hp
            lm = loss_backprop(m, y, n, t, 0.3)[0]
            params[p][idx] = orig
            ana.append(grads[p][idx])
            fd.append((lp - lm) / (2 * hp))
        ep = max(ep, rel_err(ana, fd))
    return ey, et, et2, ep


def _vn_error(rng):
    m = random_model(2, 4, seed=5, grid=SplineGrid(15, 6))
    x = rng.random((10, 10))
    pairs = [(x, denoising_task(x, 0.1, rng))]
    vn = VNParams.from_schedule(linear_schedule(-1.0, -7.0, 5, 0.5))
    _, gt, ge = vn_loss_and_grad(m, vn, pairs)
    h, ana, fd = 1e-6, [], []
    for arr, g in ((vn.t_hats, gt), (vn.etas, ge)):
        for k in range(vn.steps):
            orig = arr[k]
            arr[k] = orig + h
            lp = vn_loss_and_grad(m, vn, pairs)[0]
            arr[k] = orig - h
            lm = vn_loss_and_grad(m, vn, pairs)[0]
            arr[k] = orig
            ana.append(g[k])
            fd.append((lp - lm) / (2 * h))
    # t_hat and eta gradients differ in scale, so compare each group on its own
    return max(rel_err(ana[:vn.steps], fd[:vn.steps]), rel_err(ana[vn.steps:], fd[vn.steps:]))


def test_criterion_3_derivatives(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    eg, eh = _gmm_errors(rng)
    es = _spline_error(rng)
    ey, et, et2, ep = _foe_errors(rng)
    ev = _vn_error(rng)
    elapsed = time.perf_counter() - start
    checks = {"gmm grad": (eg, 1e-4), "gmm hess": (eh, 1e-4), "spline": (es, 1e-4),
              "foe grad_y": (ey, 1e-4), "foe d_t": (et, 1e-4), "foe d2_t": (et2, 1e-4),
              "loss params": (ep, 1e-3), "vn schedule": (ev, 1e-3)}
    ok = all(e <= tol for e, tol in checks.values()) and elapsed < 120
    detail = ", ".join(f"{k} {e:.1e}" for k, (e, _) in checks.items())
    report(3, ok, f"max relative errors: {detail}; {elapsed:.1f} s", capsys)


# 4 ---------------------------------------------------------------------------

def test_criterion_4_score_recovery(capsys):
    start = time.perf_counter()
    cfg = ScoreRecoveryConfig()
    _, mix_rep = train_1d_score_recovery(five_mode_mixture(), cfg)
    gauss = {}
    for mu, var in ((0.0, 0.25), (0.2, 0.1), (-0.5, 0.05)):
        _, rep = train_1d_score_recovery(GaussianMixture.isotropic_1d([1.0], [mu], [var]), cfg)
        gauss[(mu, var)] = max(rep[t] for t in cfg.eval_t)
    elapsed = time.perf_counter() - start
    mix_err = max(mix_rep[t] for t in cfg.eval_t)
    ok = mix_err < 0.15 and max(gauss.values()) < 0.10 and elapsed < 300
    report(4, ok, f"mixture errors {[round(mix_rep[t], 4) for t in cfg.eval_t]} (<0.15), "
                  f"Gaussian worst {{{', '.join(f'N({m},{v}): {e:.4f}' for (m, v), e in gauss.items())}}} "
                  f"(<0.10), {elapsed:.0f} s", capsys)


# 5 ---------------------------------------------------------------------------

def test_criterion_5_loss_equivalence(capsys):
    start = time.perf_counter()
    rep = loss_equivalence_check(five_mode_mixture(), n_settings=3, n_samples=100_000, seed=0)
    elapsed = time.perf_counter() - start
    worst = max(abs(d) / se for _, _, d, se in rep.pairs)
    ok = rep.passed and elapsed < 60
    report(5, ok, f"mean gaps {np.round(rep.gaps, 5).tolist()}, worst paired |diff|/se = {worst:.2f} "
                  f"(<=3), {elapsed:.1f} s", capsys)


# 6 and 7 -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def corpus_dirs():
    train_dir, test_dir = DATA / "train", DATA / "test"
    if not any(train_dir.glob("*.pgm")) or not any(test_dir.glob("*.pgm")):
        build_corpus(DATA)  # needs the optional scikit-image dependency
    return train_dir, test_dir


@pytest.fixture(scope="module")
def desk_model(corpus_dirs):
    reuse = os.environ.get("GNCPRIOR_ACCEPTANCE_MODEL")
    if reuse:
        return load_model(reuse), None
    ARTIFACTS.mkdir(exist_ok=True)
    model = FoEModel.create(depth=1)
    start = time.perf_counter()
    train(model, PatchCorpus.from_dir(corpus_dirs[0]), TrainConfig(),
          trace_path=ARTIFACTS / "desk_trace.csv", checkpoint_path=ARTIFACTS / "desk_model.json")
    return model, time.perf_counter() - start


def test_criterion_6_image_pipeline(desk_model, corpus_dirs, capsys):
    model, train_time = desk_model
    start = time.perf_counter()
    test_imgs = [load_pgm(f) for f in sorted(corpus_dirs[1].glob("*.pgm"))]
    lo, hi = model.t_range
    sched = linear_schedule(hi, lo, 30, 1.0)
    rng = make_rng(6)
    gains = {"denoise": [], "inpaint": []}
    for x in test_imgs:
        for kind, fid in (("denoise", denoising_task(x, 0.1, rng)),
                          ("inpaint", inpainting_task(x, 0.8, rng))):
            out = scheduled_solve(model, fid, fid.z, sched)
            gains[kind].append(psnr(out, x) - psnr(fid.z, x))
    elapsed = time.perf_counter() - start
    dn, inp = float(np.mean(gains["denoise"])), float(np.mean(gains["inpaint"]))
    ok = len(test_imgs) >= 5 and dn >= 3.0 and inp >= 3.0
    timing = "reused model" if train_time is None else f"training {train_time / 60:.1f} min"
    report(6, ok, f"{len(test_imgs)} held-out images, mean gain denoise {dn:.2f} dB, inpaint {inp:.2f} dB "
                  f"(>=3); {timing}, solves {elapsed:.0f} s", capsys)


def test_criterion_7_schedule_learning(desk_model, corpus_dirs, capsys):
    model, _ = desk_model
    start = time.perf_counter()
    train_imgs = [load_pgm(f) for f in sorted(corpus_dirs[0].glob("*.pgm"))][:4]
    val_imgs = [load_pgm(f) for f in sorted(corpus_dirs[1].glob("*.pgm"))]
    lo = model.t_range[0]
    parts, ok = [], True
    for kind in ("denoise", "inpaint"):
        task = {"kind": kind, "sigma": 0.1, "missing": 0.8}
        tr = make_pairs(train_imgs, task, seed=7, crop=48)
        val = make_pairs(val_imgs, task, seed=8, crop=48)
        fixed, _ = best_linear_schedule(model, tr, 30)
        learned = vn_train(model, tr, val, fixed, epochs=60, lr=1e-2, patience=15).params
        p_fixed, p_vn = mean_psnr(model, fixed, val), mean_psnr(model, learned, val)

        def final_energy(solve):
            return float(np.mean([joint_energy(model, f, solve(f), lo) for _, f in val]))

        e_vn = final_energy(lambda f: vn_forward(model, learned, f))
        e_fixed = final_energy(lambda f: vn_forward(model, fixed, f))
        e_joint = final_energy(lambda f: joint_minimize(model, f, f.z, iters=30)[0])
        good = p_vn >= p_fixed and e_fixed <= e_vn and e_joint <= e_vn
        ok &= good
        parts.append(f"{kind}: PSNR vn {p_vn:.2f} vs fixed {p_fixed:.2f}, energy fixed {e_fixed:.1f} / "
                     f"joint {e_joint:.1f} vs vn {e_vn:.1f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 15 * 60
    report(7, ok, "; ".join(parts) + f"; {elapsed:.0f} s", capsys)


# 8 ---------------------------------------------------------------------------

def test_criterion_8_structural_invariants(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(8)
    adj = 0.0
    for _ in range(20):
        k = rng.choice([1, 3, 5, 7])
        x = rng.standard_normal((2, 3, 13, 11))
        y = rng.standard_normal((2, 4, 13, 11))
        K = rng.standard_normal((4, 3, k, k))
        lhs = np.sum(conv2d(x, K) * y)
        adj = max(adj, abs(lhs - np.sum(x * conv2d_adjoint(y, K))) / max(1.0, abs(lhs)))

    grid = SplineGrid()
    ones = SplineActivation2D(grid, np.ones((grid.n_x, grid.n_t)))
    xs = np.linspace(grid.x_range[0] + 2.5 * grid.gamma_x, grid.x_range[1] - 2.5 * grid.gamma_x, 2001)
    pou = max(float(np.max(np.abs(ones.eval(xs, np.full_like(xs, t)) - 1)))
              for t in np.linspace(*grid.t_range, 7))

    from gncprior.spline import _INNER, _MIDDLE, _OUTER
    c3 = 0.0
    for order in range(4):
        sgn = (-1) ** order
        pieces = [lambda a: _INNER.deriv(order)(a + 0.5),
                  lambda a: sgn * _MIDDLE.deriv(order)(1.5 - a),
                  lambda a: sgn * _OUTER.deriv(order)(2.5 - a),
                  lambda a: 0.0]
        for k, b in enumerate((0.5, 1.5, 2.5)):
            c3 = max(c3, abs(pieces[k](b) - pieces[k + 1](b)))
        # the kernel itself switches between exactly these pieces
        for k, b in enumerate((0.5, 1.5, 2.5)):
            assert quartic_kernel(b - 1e-3, order) == pytest.approx(pieces[k](b - 1e-3), abs=1e-15)

    prox = 0.0
    for _ in range(50):
        x0, z, tau, sigma = rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(0.01, 10), rng.uniform(0.01, 2)
        u = prox_fidelity(FidelityTerm.denoising(np.full((1, 1), z), sigma), np.full((1, 1), x0), tau)[0, 0]
        ref = minimize_scalar(lambda v: 0.5 * (v - x0) ** 2 + tau * 0.5 * (v - z) ** 2 / sigma**2,
                              bracket=(-10, 10), tol=1e-12).x
        prox = max(prox, abs(u - ref))

    m = random_model(2, 4, seed=8, grid=SplineGrid(15, 6))
    lo, hi = m.t_range
    inside, hit = True, set()
    for eta in (0.5, 5.0, 50.0):
        for t0 in (lo, 0.5 * (lo + hi), hi):
            fid = FidelityTerm.denoising(rng.random((10, 10)) * 4 - 2, 0.05)
            _, trace = joint_minimize(m, fid, fid.z, t_hat0=t0, eta=eta, iters=15)
            ts = [t for _, t in trace]
            inside &= all(lo <= t <= hi for t in ts)
            hit |= {t for t in ts if t in (lo, hi)}
    elapsed = time.perf_counter() - start
    ok = adj <= 1e-10 and pou <= 1e-9 and c3 <= 1e-12 and prox <= 1e-6 and inside and elapsed < 60
    report(8, ok, f"adjoint {adj:.1e}, partition of unity {pou:.1e}, C3 jumps {c3:.1e}, prox {prox:.1e}, "
                  f"t_hat projection {'exact' if inside else 'VIOLATED'} (bounds reached: "
                  f"{sorted(round(h, 3) for h in hit)}), {elapsed:.1f} s", capsys)
