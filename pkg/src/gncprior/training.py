"""Joint score-matching training of the smoothing-conditioned prior.

A training point is a clean patch ``x``, standard normal noise ``n`` and a
log-smoothing ``t_hat ~ U(t_hat_min, t_hat_max)``; the model sees
``y = x + exp(t_hat / 2) n`` and is fitted by the denoising loss on
``grad_y R`` plus the implicit score-matching term along ``t_hat``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from scipy.stats import norm

from .foe import FoEModel, batch_loss, save_model
from .gmm import GaussianMixture, energy_batch
from .io import emit_csv, load_pgm
from .spline import _PAD, SplineGrid, spline_eval

__all__ = [
    "TrainingDiverged",
    "TrainConfig",
    "PatchCorpus",
    "AdaBeliefState",
    "make_rng",
    "sample_training_point",
    "sample_batch",
    "batch_loss_and_grad",
    "adabelief_step",
    "cosine_lr",
    "TrainResult",
    "train",
    "ScoreRecoveryConfig",
    "score_error",
    "fit_scalar_exact",
    "train_1d_score_recovery",
    "dsm_esm_gap",
    "EquivalenceReport",
    "loss_equivalence_check",
]

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Loss or gradient became non-finite; the model holds the last good checkpoint."""


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox stream; the only generator used for training."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class TrainConfig:
    t_hat_min: float = math.log(1e-4)
    t_hat_max: float = 0.0
    m_t: float | None = None  # None: 1 / pixels per patch
    batch_size: int = 16
    patch_size: int = 32
    iterations: int = 5000
    lr_start: float = 1e-3
    lr_end: float = 5e-5
    seed: int = 0
    checkpoint_every: int = 500
    rng: str = "philox"

    def __post_init__(self):
        if not self.t_hat_min < self.t_hat_max:
            raise ValueError("t_hat_min must be below t_hat_max")
        if min(self.batch_size, self.patch_size, self.iterations, self.checkpoint_every) < 1:
            raise ValueError("counts must be positive")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.rng != "philox":
            raise ValueError(f"unknown generator {self.rng!r}")

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        base = dict(batch_size=128, patch_size=96, iterations=100_000)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def weight_t(self, pixels: int) -> float:
        return self.m_t if self.m_t is not None else 1.0 / pixels


@dataclass
class PatchCorpus:
    images: list[np.ndarray]

    def __post_init__(self):
        if not self.images:
            raise ValueError("corpus is empty")
        self.images = [np.asarray(im, dtype=float) for im in self.images]

    @classmethod
    def from_dir(cls, path) -> "PatchCorpus":
        files = sorted(Path(path).glob("*.pgm"))
        if not files:
            raise FileNotFoundError(f"no .pgm files in {path}")
        return cls([load_pgm(f) for f in files])

    def check(self, patch_size: int) -> None:
        for i, im in enumerate(self.images):
            if min(im.shape) < patch_size:
                raise ValueError(f"image {i} of shape {im.shape} is smaller than the patch")

    def patch(self, size: int, rng: np.random.Generator) -> np.ndarray:
        im = self.images[rng.integers(len(self.images))]
        i = rng.integers(im.shape[0] - size + 1)
        j = rng.integers(im.shape[1] - size + 1)
        return im[i:i + size, j:j + size].copy()


def sample_training_point(corpus: PatchCorpus, config: TrainConfig, rng: np.random.Generator):
    """One ``(x, n, t_hat)`` triple."""
    x = corpus.patch(config.patch_size, rng)
    n = rng.standard_normal(x.shape)
    t_hat = rng.uniform(config.t_hat_min, config.t_hat_max)
    return x, n, float(t_hat)


def sample_batch(corpus, config, rng):
    return [sample_training_point(corpus, config, rng) for _ in range(config.batch_size)]


def batch_loss_and_grad(model: FoEModel, config: TrainConfig, batch, with_grad: bool = True):
    """Mean loss and mean parameter gradient over ``(x, n, t_hat)`` triples."""
    if not batch:
        raise ValueError("empty batch")
    x = np.stack([b[0] for b in batch])[:, None]
    n = np.stack([b[1] for b in batch])[:, None]
    t = np.array([b[2] for b in batch], dtype=float)
    y = x + np.exp(0.5 * t)[:, None, None, None] * n
    return batch_loss(model, y, n, t, config.weight_t(x[0].size), with_grad)


@dataclass
class AdaBeliefState:
    exp_avg: list[np.ndarray]
    exp_var: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdaBeliefState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adabelief_step(state: AdaBeliefState, params, grads, lr: float, mask=None):
    """One bias-corrected AdaBelief update; returns new parameters and state.

    ``mask`` marks which parameters are updated (all by default).
    """
    if len(params) != len(grads) or len(params) != len(state.exp_avg):
        raise ValueError("parameter, gradient and state lists differ in length")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingDiverged("non-finite gradient")
    step = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    new_p, new_m, new_s = [], [], []
    for i, (p, g, m, s) in enumerate(zip(params, grads, state.exp_avg, state.exp_var)):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError("shape mismatch between parameters and gradients")
        if mask is not None and not mask[i]:
            new_p.append(p)
            new_m.append(m)
            new_s.append(s)
            continue
        m = b1 * m + (1.0 - b1) * g
        s = b2 * s + (1.0 - b2) * (g - m) ** 2 + eps
        new_p.append(p - lr * (m / bc1) / (np.sqrt(s / bc2) + eps))
        new_m.append(m)
        new_s.append(s)
    return new_p, AdaBeliefState(new_m, new_s, step, b1, b2, eps)


def cosine_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class TrainResult:
    model: FoEModel
    trace: list[tuple[int, float, float]] = field(default_factory=list)
    checkpoints: list[tuple[int, float]] = field(default_factory=list)  # (iteration, EMA loss)


def train(model: FoEModel, sampler, config: TrainConfig, *, trace_path=None,
          checkpoint_path=None, ema: float = 0.98) -> TrainResult:
    """Fit ``model`` in place.

    ``sampler`` is a :class:`PatchCorpus` or any callable ``rng -> batch`` of
    ``(x, n, t_hat)`` triples.  A non-finite loss restores the last
    checkpoint and raises :class:`TrainingDiverged`.
    """
    if isinstance(sampler, PatchCorpus):
        sampler.check(config.patch_size)
        corpus = sampler
        sampler = lambda rng: sample_batch(corpus, config, rng)  # noqa: E731
    rng = make_rng(config.seed)
    params = [p.copy() for p in model.parameters()]
    mask = model.trainable()
    state = AdaBeliefState.zeros_like(params)
    good = [p.copy() for p in params]
    result = TrainResult(model)
    avg = None
    for it in range(config.iterations):
        lr = cosine_lr(it, config.iterations, config.lr_start, config.lr_end)
        loss, grads = batch_loss_and_grad(model, config, sampler(rng))
        if not math.isfinite(loss):
            model.set_parameters(good)
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        params, state = adabelief_step(state, params, grads, lr, mask)
        model.set_parameters(params)
        avg = loss if avg is None else ema * avg + (1 - ema) * loss
        result.trace.append((it, loss, lr))
        if (it + 1) % config.checkpoint_every == 0 or it + 1 == config.iterations:
            good = [p.copy() for p in params]
            result.checkpoints.append((it + 1, avg))
            log.info("iteration %d: loss %.4g (ema %.4g), lr %.3g", it + 1, loss, avg, lr)
            if checkpoint_path is not None:
                save_model(model, checkpoint_path)
    if trace_path is not None:
        emit_csv(result.trace, ("iteration", "loss", "lr"), trace_path)
    return result


# ---------------------------------------------------------------------------
# one-dimensional validation against exact mixture scores


@dataclass
class ScoreRecoveryConfig:
    """Settings of the 1D validation run.

    ``solver="exact"`` minimises the empirical loss over ``n_samples`` draws
    in closed form (for a scalar model the loss is quadratic in the spline
    weights); ``"adabelief"`` runs :func:`train` with ``train`` instead.
    """

    n_x: int = 63
    n_t: int = 16
    t_hat_min: float = math.log(1e-4)
    t_hat_max: float = 0.0
    m_t: float = 0.01
    solver: str = "exact"
    n_samples: int = 1_000_000
    ridge: float = 1e-8
    seed: int = 0
    train: TrainConfig | None = None
    eval_t: tuple[float, ...] = (1e-2, 1e-1, 1.0)
    eval_points: int = 1001
    quantiles: tuple[float, float] = (0.05, 0.95)

    def __post_init__(self):
        if self.solver not in ("exact", "adabelief"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if self.train is None:
            self.train = TrainConfig(t_hat_min=self.t_hat_min, t_hat_max=self.t_hat_max,
                                     m_t=self.m_t, batch_size=1024, iterations=3000,
                                     lr_start=1e-2, lr_end=1e-4, seed=self.seed,
                                     checkpoint_every=250)
        self.eval_t = tuple(self.eval_t)
        self.quantiles = tuple(self.quantiles)

    @classmethod
    def from_dict(cls, doc: dict) -> "ScoreRecoveryConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)


def _design(grid: SplineGrid, y, t_hat, dx: int, dt: int) -> sp.csr_matrix:
    """Sparse map from flattened weights ``(n_x, n_t)`` to ``d^dx/dx d^dt/dt phi(y, t_hat)``."""
    xi, xv = grid.x_basis(y, dx)
    ti, tv = grid.t_basis(t_hat, dt)
    xi = xi - _PAD
    rows = np.repeat(np.arange(y.size), 25)
    cols = (xi[:, :, None] * grid.n_t + ti[:, None, :]).ravel()
    vals = (xv[:, :, None] * tv[:, None, :]).ravel()
    ok = np.broadcast_to(((xi >= 0) & (xi < grid.n_x))[:, :, None], (y.size, 5, 5)).ravel()
    return sp.csr_matrix((vals[ok], (rows[ok], cols[ok])), shape=(y.size, grid.n_x * grid.n_t))


def fit_scalar_exact(model: FoEModel, x, n, t_hat, m_t: float, ridge: float = 1e-8) -> FoEModel:
    """Set the activation of a scalar model to the exact minimiser of the mean loss.

    ``x``, ``n`` and ``t_hat`` are 1D sample arrays; ``ridge`` only pins weights
    that no sample touches.
    """
    if model.depth != 1 or model.layers[0].conv.kernels.size != 1:
        raise ValueError("exact fitting needs a scalar model")
    x, n, t_hat = (np.asarray(v, dtype=float).ravel() for v in (x, n, t_hat))
    grid = model.grid
    s = float(model.layers[0].conv.kernels.ravel()[0])
    y = x + np.exp(0.5 * t_hat) * n
    a = s * y
    gy = sp.diags(s * np.exp(0.5 * t_hat)) @ _design(grid, a, t_hat, 1, 0)
    gt = _design(grid, a, t_hat, 0, 1)
    gtt = _design(grid, a, t_hat, 0, 2)
    lhs = (gy.T @ gy + m_t * (gt.T @ gt)) / y.size
    rhs = (gy.T @ n + m_t * np.asarray(gtt.sum(axis=0)).ravel()) / y.size
    w = spsolve((lhs + ridge * sp.identity(lhs.shape[0])).tocsc(), rhs)
    model.layers[0].weights = w.reshape(1, grid.n_x, grid.n_t)
    return model


def _mixture_quantiles(gmm: GaussianMixture, t: float, qs, lo=-20.0, hi=20.0):
    xs = np.linspace(lo, hi, 200_001)
    sd = np.sqrt(gmm.covariances[:, 0, 0] + t)
    cdf = (gmm.weights * norm.cdf((xs[:, None] - gmm.means[:, 0]) / sd)).sum(axis=1)
    return np.interp(qs, cdf, xs)


def score_error(model: FoEModel, gmm: GaussianMixture, t: float, quantiles=(0.05, 0.95),
                n_points: int = 1001) -> float:
    """Relative L2 error of the model score against the exact smoothed score.

    Measured on an even grid over the central quantile range of the smoothed
    density; the model score is ``-d/dy R`` of a scalar model.
    """
    lo, hi = _mixture_quantiles(gmm, t, quantiles)
    ys = np.linspace(lo, hi, n_points)
    _, g, _ = energy_batch(gmm, ys, t, hessian=False)
    layer = model.layers[0]
    scale = float(layer.conv.kernels[0, 0, 0, 0])
    feat = (scale * ys).reshape(-1, 1)
    pred = scale * spline_eval(model.grid, layer.weights, feat,
                               np.full(ys.size, math.log(t)), 1, 0)[:, 0]
    return float(np.linalg.norm(pred - g[:, 0]) / np.linalg.norm(g[:, 0]))


def _mixture_sampler(gmm: GaussianMixture, config: TrainConfig):
    def draw(rng):
        b = config.batch_size
        x = gmm.sample(b, rng)[:, 0].reshape(b, 1, 1)
        n = rng.standard_normal((b, 1, 1))
        t = rng.uniform(config.t_hat_min, config.t_hat_max, size=b)
        return list(zip(x, n, t))
    return draw


def train_1d_score_recovery(gmm: GaussianMixture, config: ScoreRecoveryConfig | None = None,
                            model: FoEModel | None = None):
    """Train a scalar prior on mixture samples and report score errors per ``t``.

    Returns ``(model, report)`` where ``report`` maps each evaluation ``t``
    to its relative L2 score error (plus ``"checkpoints"`` for AdaBelief runs).
    """
    if gmm.dim != 1:
        raise ValueError("score recovery needs a one-dimensional mixture")
    config = config or ScoreRecoveryConfig()
    if model is None:
        grid = SplineGrid(config.n_x, config.n_t, (config.t_hat_min, config.t_hat_max))
        model = FoEModel.scalar(grid)
    report: dict = {}
    if config.solver == "exact":
        rng = make_rng(config.seed)
        x = gmm.sample(config.n_samples, rng)[:, 0]
        n = rng.standard_normal(config.n_samples)
        t = rng.uniform(config.t_hat_min, config.t_hat_max, size=config.n_samples)
        fit_scalar_exact(model, x, n, t, config.m_t, config.ridge)
    else:
        result = train(model, _mixture_sampler(gmm, config.train), config.train)
        report["checkpoints"] = result.checkpoints
    for t in config.eval_t:
        report[t] = score_error(model, gmm, t, config.quantiles, config.eval_points)
    return model, report


def _mixture_grad_1d(gmm: GaussianMixture, y, t):
    """``d/dy F(y, t)`` of a 1D mixture with a separate ``t`` per sample."""
    var = gmm.covariances[:, 0, 0] + t[:, None]
    r = y[:, None] - gmm.means[:, 0]
    logp = np.log(gmm.weights) - 0.5 * np.log(2 * np.pi * var) - 0.5 * r**2 / var
    resp = np.exp(logp - logp.max(axis=1, keepdims=True))
    resp /= resp.sum(axis=1, keepdims=True)
    return (resp * r / var).sum(axis=1)


def dsm_esm_gap(model: FoEModel, gmm: GaussianMixture, x, n, t_hat):
    """Per-sample difference of the denoising and explicit score-matching terms.

    For noisy ``y = x + exp(t_hat/2) n`` both terms weight the squared score
    residual by ``t``; their difference is ``theta``-independent in
    expectation.  Returns the per-sample differences (average them for the
    Monte-Carlo estimate).
    """
    x, n, t_hat = (np.asarray(v, dtype=float).ravel() for v in (x, n, t_hat))
    y = x + np.exp(0.5 * t_hat) * n
    layer = model.layers[0]
    scale = float(layer.conv.kernels[0, 0, 0, 0])
    model_grad = scale * spline_eval(model.grid, layer.weights, (scale * y)[:, None], t_hat, 1, 0)[:, 0]
    true_grad = _mixture_grad_1d(gmm, y, np.exp(t_hat))
    s = np.exp(0.5 * t_hat)
    dsm = 0.5 * (s * model_grad - n) ** 2
    esm = 0.5 * (s * (model_grad - true_grad)) ** 2
    return dsm - esm


@dataclass
class EquivalenceReport:
    gaps: list[float]  # mean J_DSM - J_ESM per parameter setting
    pairs: list[tuple[int, int, float, float]]  # (a, b, difference, standard error)

    @property
    def passed(self) -> bool:
        return all(abs(d) <= 3.0 * se for _, _, d, se in self.pairs)


def loss_equivalence_check(gmm: GaussianMixture, n_settings: int = 3, n_samples: int = 100_000,
                           seed: int = 0, grid: SplineGrid | None = None) -> EquivalenceReport:
    """Compare ``J_DSM - J_ESM`` across random parameter settings on one sample set.

    Standard errors come from the paired per-sample differences, since all
    settings share the samples.
    """
    if n_settings < 2:
        raise ValueError("need at least two parameter settings")
    rng = make_rng(seed)
    grid = grid or SplineGrid()
    x = gmm.sample(n_samples, rng)[:, 0]
    n = rng.standard_normal(n_samples)
    t = rng.uniform(*grid.t_range, size=n_samples)
    base = FoEModel.scalar(grid)
    diffs = []
    for _ in range(n_settings):
        model = base.copy()
        model.layers[0].weights = base.layers[0].weights + rng.normal(0.0, 0.5, base.layers[0].weights.shape)
        diffs.append(dsm_esm_gap(model, gmm, x, n, t))
    pairs = []
    for a in range(n_settings):
        for b in range(a + 1, n_settings):
            d = diffs[a] - diffs[b]
            pairs.append((a, b, float(d.mean()), float(d.std(ddof=1) / math.sqrt(n_samples))))
    return EquivalenceReport([float(d.mean()) for d in diffs], pairs)
