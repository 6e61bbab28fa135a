"""MAP inference with a smoothing-conditioned prior.

Three solvers share the proximal-gradient step
``x <- prox_{tau D}(x - tau grad_x R(x, t_hat))``:

* :func:`joint_minimize` also descends ``t_hat`` on the joint energy,
* :func:`scheduled_solve` follows a fixed log-linear ``t_hat`` schedule
  with ``tau = eta * exp(t_hat)``,
* :func:`vn_forward` unrolls ``I`` steps with free ``(t_hat_i, eta_i)``,
  which :func:`vn_train` fits to paired data.

Images are ``(H, W)`` or batches ``(B, H, W)``; the fidelity's observation
fixes the shape.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .foe import FoEModel, PriorGraph
from .gnc import Schedule, log_schedule
from .training import AdaBeliefState, TrainingDiverged, adabelief_step

__all__ = [
    "SolverDiverged",
    "FidelityTerm",
    "prox_fidelity",
    "denoising_task",
    "inpainting_task",
    "joint_energy",
    "joint_minimize",
    "linear_schedule",
    "scheduled_solve",
    "VNParams",
    "vn_forward",
    "vn_loss_and_grad",
    "vn_train",
    "best_linear_schedule",
    "psnr",
    "mean_psnr",
    "PSNR_CAP",
]

log = logging.getLogger(__name__)

PSNR_CAP = 99.0  # stands in for +inf in tables


class SolverDiverged(FloatingPointError):
    """Non-finite energy during a solve; ``trace`` holds the steps so far."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass
class FidelityTerm:
    """Data term ``D(z, x)``: Gaussian denoising or noise-free inpainting.

    For inpainting ``mask == 1`` marks observed pixels.
    """

    kind: str
    z: np.ndarray
    sigma2: float | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        if self.kind == "denoise":
            if self.sigma2 is None or not self.sigma2 > 0:
                raise ValueError("denoising needs sigma2 > 0")
        elif self.kind == "inpaint":
            if self.mask is None:
                raise ValueError("inpainting needs a mask")
            m = np.asarray(self.mask, dtype=float)
            if m.shape != self.z.shape:
                raise ValueError("mask and observation differ in shape")
            if not np.all((m == 0) | (m == 1)):
                raise ValueError("mask must be binary")
            self.mask = m
        else:
            raise ValueError(f"unknown fidelity {self.kind!r}")

    @classmethod
    def denoising(cls, z, sigma: float) -> "FidelityTerm":
        return cls("denoise", z, sigma2=float(sigma) ** 2)

    @classmethod
    def inpainting(cls, z, mask) -> "FidelityTerm":
        return cls("inpaint", z, mask=mask)

    def energy(self, x) -> np.ndarray:
        """``D(z, x)`` per image (a float for a single image)."""
        x = np.asarray(x, dtype=float)
        self._check(x)
        if self.kind == "denoise":
            d = 0.5 * (x - self.z) ** 2 / self.sigma2
        else:
            bad = (self.mask == 1) & (np.abs(x - self.z) > 1e-12)
            d = np.where(bad, np.inf, 0.0)
        return d.sum() if d.ndim == 2 else d.reshape(d.shape[0], -1).sum(axis=1)

    def _check(self, x):
        if np.shape(x) != self.z.shape:
            raise ValueError(f"image shape {np.shape(x)} does not match observation {self.z.shape}")


def prox_fidelity(fid: FidelityTerm, x, tau):
    """``argmin_u 1/2 |u - x|^2 + tau D(z, u)``.

    ``x`` and ``tau`` may be tape variables (used by the unrolled solver);
    ``tau`` is a scalar or one value per image.
    """
    fid._check(ad.value_of(x))
    tv = np.asarray(ad.value_of(tau), dtype=float)
    if np.any(tv < 0):
        raise ValueError("tau must be non-negative")
    if fid.kind == "inpaint":
        if isinstance(x, ad.Var):
            return ad.where(fid.mask == 1, fid.z, x)
        return np.where(fid.mask == 1, fid.z, x)
    if isinstance(tau, ad.Var) or tv.ndim == 0:
        r = tau * (1.0 / fid.sigma2)
    else:
        r = tv.reshape(-1, *([1] * (fid.z.ndim - 1))) / fid.sigma2
    out = (x + r * fid.z) / (r + 1.0)
    return out


def denoising_task(x, sigma: float, rng: np.random.Generator) -> FidelityTerm:
    x = np.asarray(x, dtype=float)
    return FidelityTerm.denoising(x + sigma * rng.standard_normal(x.shape), sigma)


def inpainting_task(x, missing: float, rng: np.random.Generator) -> FidelityTerm:
    """I.i.d. Bernoulli mask with ``missing`` fraction removed; missing pixels are zero."""
    if not 0 <= missing < 1:
        raise ValueError("missing fraction must lie in [0, 1)")
    x = np.asarray(x, dtype=float)
    mask = (rng.random(x.shape) >= missing).astype(float)
    return FidelityTerm.inpainting(mask * x, mask)


def _batch(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"expected (H, W) or (B, H, W) images, got {x.shape}")


def _prior(model, x, t_hat):
    """Energy per image, gradient and ``dR/dt_hat`` at one batch."""
    b = x.shape[0]
    g = PriorGraph(model, x[:, None], np.broadcast_to(t_hat, (b,)).copy())
    return g.energy().value, g.grad_y().value[:, 0], g


def joint_energy(model: FoEModel, fid: FidelityTerm, x, t_hat) -> np.ndarray:
    """``R(x, t_hat) + D(z, x)`` per image (a float for one image)."""
    xb, single = _batch(x)
    b = xb.shape[0]
    r = PriorGraph(model, xb[:, None], np.broadcast_to(t_hat, (b,)).copy()).energy().value
    e = r + np.atleast_1d(fid.energy(x))
    return float(e[0]) if single else e


def joint_minimize(model: FoEModel, fid: FidelityTerm, x0, t_hat0: float | None = None,
                   eta: float = 1.0, iters: int = 30):
    """Preconditioned proximal gradient on ``(x, t_hat)`` jointly.

    Returns ``(x_final, trace)`` where ``trace[i] = (energy_i, t_hat_i)`` is
    recorded at iterate ``i`` before its step (mean over a batch), with one
    extra entry for the final iterate.
    """
    if eta < 0 or iters < 0:
        raise ValueError("eta and iters must be non-negative")
    lo, hi = model.t_range
    t0 = hi if t_hat0 is None else float(t_hat0)
    if not lo <= t0 <= hi:
        raise ValueError(f"t_hat0 outside [{lo}, {hi}]")
    x, single = _batch(x0)
    d = x[0].size
    t = np.full(x.shape[0], t0)
    trace = []
    for i in range(iters + 1):
        r, g, graph = _prior(model, x, t)
        e = r + np.atleast_1d(fid.energy(x[0] if single else x))
        trace.append((float(e.mean()), float(t.mean())))
        if not np.all(np.isfinite(e)):
            raise SolverDiverged(f"non-finite energy at step {i}", trace)
        if i == iters:
            break
        dt = graph.t_jets()[0].value
        tau = eta * np.exp(t)
        step = x - tau[:, None, None] * g
        x = prox_fidelity(fid, step[0] if single else step, tau[0] if single else tau)
        x = _batch(x)[0]
        t = np.clip(t - eta / d * dt, lo, hi)
    return (x[0] if single else x), trace


def linear_schedule(t_hat0: float, t_hat_min: float, steps: int, eta: float = 1.0) -> Schedule:
    """``steps`` values of ``t`` evenly spaced in ``log t`` from ``t_hat0`` to ``t_hat_min``."""
    if t_hat0 <= t_hat_min:
        return Schedule.constant(math.exp(t_hat_min), steps, eta)
    return log_schedule(math.exp(t_hat0), math.exp(t_hat_min), steps, eta)


def scheduled_solve(model: FoEModel, fid: FidelityTerm, x0, schedule: Schedule, callback=None):
    """Proximal gradient steps along a fixed smoothing schedule.

    Step ``i`` uses ``t_hat_i = log t_i`` and ``tau_i = eta_i t_i`` in both
    the gradient step and the proximal map.  ``callback(i, x_i, t_hat_i)``
    is called before every step and once after the last.
    """
    ts = np.log(schedule.values)
    model.check_t(ts)
    x, single = _batch(x0)
    for i, (th, eta) in enumerate(zip(ts, schedule.step_sizes)):
        if callback is not None:
            callback(i, x[0] if single else x, th)
        _, g, _ = _prior(model, x, th)
        if not np.all(np.isfinite(g)):
            raise SolverDiverged(f"non-finite gradient at step {i}")
        tau = eta * math.exp(th)
        x = _batch(prox_fidelity(fid, (x - tau * g)[0] if single else x - tau * g, tau))[0]
    out = x[0] if single else x
    if callback is not None:
        callback(len(ts), out, ts[-1])
    return out


@dataclass
class VNParams:
    """Per-step log-smoothing values and absolute step sizes of an unrolled solver."""

    t_hats: np.ndarray
    etas: np.ndarray

    def __post_init__(self):
        self.t_hats = np.asarray(self.t_hats, dtype=float).ravel().copy()
        self.etas = np.asarray(self.etas, dtype=float).ravel().copy()
        if self.t_hats.size < 1 or self.t_hats.shape != self.etas.shape:
            raise ValueError("need I >= 1 matching t_hats and etas")
        if np.any(self.etas < 0):
            raise ValueError("step sizes must be non-negative")

    @property
    def steps(self) -> int:
        return self.t_hats.size

    @classmethod
    def from_schedule(cls, schedule: Schedule) -> "VNParams":
        return cls(np.log(schedule.values), schedule.step_sizes * schedule.values)

    def projected(self, t_range, eta_min: float = 1e-8) -> "VNParams":
        return VNParams(np.clip(self.t_hats, *t_range), np.maximum(self.etas, eta_min))

    def to_dict(self) -> dict:
        return {"t_hats": self.t_hats.tolist(), "etas": self.etas.tolist()}

    @classmethod
    def from_dict(cls, doc) -> "VNParams":
        return cls(doc["t_hats"], doc["etas"])


def _unroll(model, fid, x0, t_hats, etas):
    """``x_I`` of the unrolled recursion; ``t_hats``/``etas`` are per-step scalars or Vars."""
    x = x0
    b = ad.value_of(x0).shape[0]
    ones = np.ones(b)
    for th, eta in zip(t_hats, etas):
        tb = th * ones if isinstance(th, ad.Var) else np.full(b, th)
        g = PriorGraph(model, x.reshape(b, 1, *x.shape[1:]) if isinstance(x, ad.Var)
                       else x[:, None], tb).grad_y()
        g = g.reshape(ad.value_of(x).shape)
        x = prox_fidelity(fid, x - eta * g, eta)
    return x


def vn_forward(model: FoEModel, vn: VNParams, fid: FidelityTerm, x0=None):
    """Endpoint of the unrolled scheme started at ``x0`` (default ``z``)."""
    model.check_t(vn.t_hats)
    x0 = fid.z if x0 is None else x0
    x, single = _batch(x0)
    sub = fid if not single else FidelityTerm(fid.kind, fid.z[None], fid.sigma2,
                                              None if fid.mask is None else fid.mask[None])
    out = ad.value_of(_unroll(model, sub, x, vn.t_hats, vn.etas))
    return out[0] if single else out


def _single(fid: FidelityTerm, i: int | None) -> FidelityTerm:
    if fid.z.ndim == 2:
        z, m = fid.z[None], None if fid.mask is None else fid.mask[None]
    else:
        z, m = fid.z[i:i + 1], None if fid.mask is None else fid.mask[i:i + 1]
    return FidelityTerm(fid.kind, z, fid.sigma2, m)


def vn_loss_and_grad(model: FoEModel, vn: VNParams, pairs):
    """Mean squared endpoint error over ``(target, fidelity)`` pairs and its gradient.

    Returns ``(loss, grad_t_hats, grad_etas)``.  Images are processed one at
    a time to bound memory; each pair's fidelity holds one ``(H, W)`` image.
    """
    if not pairs:
        raise ValueError("no training pairs")
    model.check_t(vn.t_hats)
    total, gt, ge = 0.0, np.zeros(vn.steps), np.zeros(vn.steps)
    for target, fid in pairs:
        sub = _single(fid, None)
        tv = [ad.var(v) for v in vn.t_hats]
        ev = [ad.var(v) for v in vn.etas]
        x = _unroll(model, sub, sub.z, tv, ev)
        r = x - np.asarray(target, dtype=float)[None]
        loss = (r * r).sum()
        grads = ad.grad(loss, tv + ev)
        total += float(loss.value)
        gt += np.array([float(g) for g in grads[:vn.steps]])
        ge += np.array([float(g) for g in grads[vn.steps:]])
    n = len(pairs)
    return total / n, gt / n, ge / n


def _mse(model, vn, pairs) -> float:
    errs = [np.sum((vn_forward(model, vn, f) - t) ** 2) for t, f in pairs]
    return float(np.mean(errs))


def mean_psnr(model, vn, pairs) -> float:
    return float(np.mean([min(psnr(vn_forward(model, vn, f), t), PSNR_CAP) for t, f in pairs]))


def best_linear_schedule(model: FoEModel, pairs, steps: int, t_hat0_grid=None,
                         eta_grid=(0.25, 0.5, 1.0, 2.0)):
    """Grid search of ``(t_hat0, eta)`` for the fixed schedule by mean squared error.

    Returns ``(VNParams, table)`` with ``table`` rows ``(t_hat0, eta, mse)``.
    """
    lo, hi = model.t_range
    if t_hat0_grid is None:
        t_hat0_grid = np.linspace(lo, hi, 10)
    table, best = [], None
    for t0 in t_hat0_grid:
        for eta in eta_grid:
            vn = VNParams.from_schedule(linear_schedule(t0, lo, steps, eta))
            err = _mse(model, vn, pairs)
            table.append((float(t0), float(eta), err))
            if np.isfinite(err) and (best is None or err < best[0]):
                best = (err, vn)
    if best is None:
        raise SolverDiverged("every fixed schedule diverged")
    return best[1], table


@dataclass
class VNTrainResult:
    params: VNParams
    init: VNParams
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (epoch, train, val)


def vn_train(model: FoEModel, train_pairs, val_pairs, init: VNParams, epochs: int = 100,
             lr: float = 1e-2, patience: int | None = None) -> VNTrainResult:
    """Fit the ``2 I`` schedule parameters by projected AdaBelief on the endpoint error.

    ``t_hats`` are clipped to the model range after each step; step sizes
    are updated through ``log eta``, which keeps them positive.

    The model stays frozen.  The returned parameters are those with the
    lowest validation error seen, the initialisation included.
    """
    if not train_pairs or not val_pairs:
        raise ValueError("need training and validation pairs")
    lo, hi = model.t_range
    vn = init.projected((lo, hi))
    best_val = _mse(model, vn, val_pairs)
    best = vn
    result = VNTrainResult(best, init, [(0, float("nan"), best_val)])
    # step sizes span decades (eta_i ~ t_i), so they are optimised in log space
    log_eta = np.log(vn.etas)
    state = AdaBeliefState.zeros_like([vn.t_hats, log_eta])
    stale = 0
    for epoch in range(1, epochs + 1):
        loss, gt, ge = vn_loss_and_grad(model, vn, train_pairs)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite schedule loss at epoch {epoch}")
        (t_new, log_eta), state = adabelief_step(state, [vn.t_hats, log_eta], [gt, ge * vn.etas], lr)
        vn = VNParams(t_new, np.exp(log_eta)).projected((lo, hi))
        log_eta = np.log(vn.etas)
        val = _mse(model, vn, val_pairs)
        result.history.append((epoch, loss, val))
        log.info("epoch %d: train %.5g, validation %.5g", epoch, loss, val)
        if val < best_val:
            best_val, best, stale = val, vn, 0
        else:
            stale += 1
            if patience is not None and stale >= patience:
                break
    result.params = best
    return result


def psnr(x, reference, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; ``inf`` for identical images."""
    x = np.asarray(x, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if x.shape != reference.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {reference.shape}")
    mse = float(np.mean((x - reference) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)
