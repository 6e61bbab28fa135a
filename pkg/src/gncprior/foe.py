"""Smoothing-conditioned Fields-of-Experts regulariser.

The prior is a stack of convolutions and per-channel 2D spline activations,

    R(y, t_hat) = sum( phi_L(K_L phi_{L-1}( ... phi_1(K_1 y) ... )) )

where every activation also depends on the log-smoothing ``t_hat``.
Images are batched as ``(B, 1, H, W)`` with one ``t_hat`` per image.

All derivatives are assembled from three differentiable primitives (conv,
its adjoint and spline evaluation) on the tape in :mod:`gncprior.autodiff`:

* ``grad_y R`` is an explicit backward pass written with those primitives,
* ``d/dt_hat R`` and ``d^2/dt_hat^2 R`` come from propagating second-order
  jets in ``t_hat`` forward through the layers,
* parameter gradients of any scalar built from the two is reverse mode over
  the resulting graph.  The highest spline partial ever required is of total
  order three.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .conv import ConvOp, conv, conv_t, dct_filters, identity_conv, kaiming_init
from .spline import (
    SplineActivation2D,
    SplineGrid,
    fit_weights,
    locate,
    sample_activation,
    spline_eval,
    spline_weight_vjp,
)

__all__ = [
    "FORMAT_VERSION",
    "FoELayer",
    "FoEModel",
    "spline_op",
    "PriorGraph",
    "foe_energy",
    "foe_grad_x",
    "foe_t_derivatives",
    "loss_backprop",
    "batch_loss",
    "save_model",
    "load_model",
    "export_params",
]

FORMAT_VERSION = 1


def spline_op(grid: SplineGrid, weights, x, t_hat, dx: int = 0, dt: int = 0):
    """Tape-aware spline partial; ``weights``, ``x`` and ``t_hat`` may be Vars."""
    wv, xv, tv = ad.value_of(weights), ad.value_of(x), ad.value_of(t_hat)
    b = xv.shape[0]
    loc = locate(grid, xv)
    out = spline_eval(grid, wv, xv, tv, dx, dt, loc=loc)

    def vjp_x(g):
        return g * spline_eval(grid, wv, xv, tv, dx + 1, dt, loc=loc)

    def vjp_t(g):
        return (g * spline_eval(grid, wv, xv, tv, dx, dt + 1, loc=loc)).reshape(b, -1).sum(axis=1)

    def vjp_w(g):
        return spline_weight_vjp(grid, g, xv, tv, dx, dt, loc=loc)

    return ad.apply(out, (weights, x, t_hat), (vjp_w, vjp_x, vjp_t))


@dataclass
class FoELayer:
    conv: ConvOp
    weights: np.ndarray  # (n_out, n_x, n_t), one activation per output channel
    train_kernels: bool = True

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape[0] != self.conv.n_out:
            raise ValueError("need one activation per output channel")


@dataclass
class FoEModel:
    """Layers of (convolution, activations) sharing one spline grid."""

    grid: SplineGrid
    layers: list[FoELayer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.conv.n_out != nxt.conv.n_in:
                raise ValueError("channel counts do not chain")
        for layer in self.layers:
            if layer.weights.shape[1:] != (self.grid.n_x, self.grid.n_t):
                raise ValueError("activation weights do not match the grid")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def t_range(self) -> tuple[float, float]:
        return self.grid.t_range

    @classmethod
    def create(cls, depth: int = 1, channels: int = 48, grid: SplineGrid | None = None,
               seed: int = 0) -> "FoEModel":
        """DCT first layer, Kaiming 3x3 deeper layers, identity/quadratic activations."""
        grid = grid or SplineGrid()
        ident = fit_weights(grid, lambda x: x)
        quad = fit_weights(grid, lambda x: 0.5 * x**2)
        convs = [dct_filters(7)]
        if channels != 48:
            convs = [ConvOp(convs[0].kernels[:channels])]
        for i in range(1, depth):
            convs.append(kaiming_init(channels, channels, 3, seed + i))
        layers = [
            FoELayer(c, np.repeat((quad if i == depth - 1 else ident)[None], c.n_out, axis=0))
            for i, c in enumerate(convs)
        ]
        return cls(grid, layers)

    @classmethod
    def scalar(cls, grid: SplineGrid | None = None, init: str = "quadratic") -> "FoEModel":
        """One fixed identity convolution and a single activation (1D densities)."""
        grid = grid or SplineGrid()
        w = fit_weights(grid, (lambda x: 0.5 * x**2) if init == "quadratic" else (lambda x: x))
        return cls(grid, [FoELayer(identity_conv(1), w[None], train_kernels=False)])

    def parameters(self) -> list[np.ndarray]:
        """Flat list ``[K_1, W_1, K_2, W_2, ...]`` (views, not copies)."""
        out = []
        for layer in self.layers:
            out += [layer.conv.kernels, layer.weights]
        return out

    def trainable(self) -> list[bool]:
        out = []
        for layer in self.layers:
            out += [layer.train_kernels, True]
        return out

    def set_parameters(self, params) -> None:
        for i, layer in enumerate(self.layers):
            layer.conv.kernels = np.array(params[2 * i], dtype=float)
            layer.weights = np.array(params[2 * i + 1], dtype=float)

    def copy(self) -> "FoEModel":
        return FoEModel(self.grid, [
            FoELayer(ConvOp(l.conv.kernels.copy()), l.weights.copy(), l.train_kernels)
            for l in self.layers
        ])

    def activation(self, layer: int, channel: int) -> SplineActivation2D:
        return SplineActivation2D(self.grid, self.layers[layer].weights[channel])

    def check_t(self, t_hat) -> np.ndarray:
        t = np.asarray(ad.value_of(t_hat), dtype=float)
        lo, hi = self.grid.t_range
        if np.any(t < lo - 1e-12) or np.any(t > hi + 1e-12):
            raise ValueError(f"t_hat outside [{lo}, {hi}]")
        return t


def _as_batch(y):
    y = np.asarray(ad.value_of(y), dtype=float)
    if y.ndim == 2:
        return y[None, None], True
    if y.ndim == 3:
        return y[:, None], False
    if y.ndim == 4 and y.shape[1] == 1:
        return y, False
    raise ValueError(f"expected (H, W), (B, H, W) or (B, 1, H, W) images, got {y.shape}")


class PriorGraph:
    """Lazily built quantities of the prior for one batch ``(y, t_hat)``.

    ``params`` may be Vars (for parameter gradients), ``y`` and ``t_hat`` may
    be Vars as well (unrolled solvers differentiate through both).  Spline
    partials are memoised per layer, so gradient and jets share evaluations.
    """

    def __init__(self, model: FoEModel, y, t_hat, params=None):
        self.model = model
        self.params = params if params is not None else model.parameters()
        self.y = y
        b = ad.value_of(y).shape[0]
        tv = model.check_t(t_hat)
        self.t = t_hat if isinstance(t_hat, ad.Var) else np.broadcast_to(tv, (b,)).copy()
        self._cache: dict = {}
        self.features = []  # pre-activation features a_i
        u = y
        for i in range(model.depth):
            a = conv(u, self.params[2 * i])
            self.features.append(a)
            if i < model.depth - 1:
                u = self.phi(i, 0, 0)

    def phi(self, layer: int, dx: int, dt: int):
        key = (layer, dx, dt)
        if key not in self._cache:
            self._cache[key] = spline_op(self.model.grid, self.params[2 * layer + 1],
                                         self.features[layer], self.t, dx, dt)
        return self._cache[key]

    def energy(self):
        b = ad.value_of(self.y).shape[0]
        return self.phi(self.model.depth - 1, 0, 0).reshape(b, -1).sum(axis=1)

    def grad_y(self):
        """Backward pass for ``grad_y R``, itself built from tape primitives."""
        if "grad_y" not in self._cache:
            g = self.phi(self.model.depth - 1, 1, 0)
            for i in range(self.model.depth - 1, 0, -1):
                g = conv_t(g, self.params[2 * i]) * self.phi(i - 1, 1, 0)
            self._cache["grad_y"] = conv_t(g, self.params[0])
        return self._cache["grad_y"]

    def t_jets(self):
        """Per-image ``(dR/dt_hat, d2R/dt_hat2)`` via forward jet propagation."""
        if "jets" in self._cache:
            return self._cache["jets"]
        da = dda = None  # the input image does not depend on t_hat
        for i in range(self.model.depth):
            if i > 0:
                da, dda = conv(du, self.params[2 * i]), conv(ddu, self.params[2 * i])
            du = self.phi(i, 0, 1)
            ddu = self.phi(i, 0, 2)
            if da is not None:
                phi_x = self.phi(i, 1, 0)
                du = phi_x * da + du
                ddu = self.phi(i, 2, 0) * da * da + 2.0 * self.phi(i, 1, 1) * da + ddu + phi_x * dda
        b = ad.value_of(self.y).shape[0]
        self._cache["jets"] = (du.reshape(b, -1).sum(axis=1), ddu.reshape(b, -1).sum(axis=1))
        return self._cache["jets"]

    def loss(self, noise, m_t):
        """Per-image score-matching loss in log-smoothing coordinates."""
        b = ad.value_of(self.y).shape[0]
        scale = np.exp(0.5 * ad.value_of(self.t)).reshape(b, 1, 1, 1)
        resid = self.grad_y() * scale - noise
        data_term = 0.5 * (resid * resid).reshape(b, -1).sum(axis=1)
        dr, ddr = self.t_jets()
        return data_term + 0.5 * m_t * (dr * dr - 2.0 * ddr)


def foe_energy(model: FoEModel, y, t_hat):
    """``R(y, t_hat)``; scalar for one ``(H, W)`` image, else one value per image."""
    yb, single = _as_batch(y)
    e = PriorGraph(model, yb, t_hat).energy().value
    return float(e[0]) if single else e


def foe_grad_x(model: FoEModel, y, t_hat):
    """``grad_y R(y, t_hat)`` with the shape of ``y``."""
    yb, _ = _as_batch(y)
    g = PriorGraph(model, yb, t_hat).grad_y().value
    return g.reshape(np.shape(y))


def foe_t_derivatives(model: FoEModel, y, t_hat):
    """``(dR/dt_hat, d2R/dt_hat2)``; scalars for one image."""
    yb, single = _as_batch(y)
    d1, d2 = PriorGraph(model, yb, t_hat).t_jets()
    if single:
        return float(d1.value[0]), float(d2.value[0])
    return d1.value, d2.value


def batch_loss(model: FoEModel, y, noise, t_hat, m_t, with_grad: bool = True):
    """Mean loss over a batch and its gradient for every entry of ``model.parameters()``.

    Parameters that are not trainable receive zero gradients.
    """
    yb, _ = _as_batch(y)
    nb = np.asarray(noise, dtype=float).reshape(yb.shape)
    params = [ad.var(p) if (with_grad and tr) else p
              for p, tr in zip(model.parameters(), model.trainable())]
    losses = PriorGraph(model, yb, t_hat, params).loss(nb, m_t)
    total = losses.sum() * (1.0 / yb.shape[0])
    if not with_grad:
        return float(total.value), None
    vars_ = [p for p in params if isinstance(p, ad.Var)]
    grads = iter(ad.grad(total, vars_))
    out = [next(grads) if isinstance(p, ad.Var) else np.zeros_like(p) for p in params]
    return float(total.value), out


def loss_backprop(model: FoEModel, y, noise, t_hat, m_t):
    """Loss of one noisy image ``y`` with noise ``noise`` and its parameter gradient."""
    yb, _ = _as_batch(y)
    if yb.shape[0] != 1:
        raise ValueError("loss_backprop takes a single image; use batch_loss for batches")
    return batch_loss(model, yb, noise, np.atleast_1d(t_hat), m_t)


# ---------------------------------------------------------------------------
# persistence


def save_model(model: FoEModel, path) -> None:
    doc = {
        "format": "gncprior-foe",
        "version": FORMAT_VERSION,
        "depth": model.depth,
        "grid": model.grid.to_dict(),
        "layers": [
            {"kernels": l.conv.kernels.tolist(), "weights": l.weights.tolist(),
             "train_kernels": l.train_kernels}
            for l in model.layers
        ],
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def load_model(path) -> FoEModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "gncprior-foe":
        raise ValueError(f"{path} is not a model file")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')}")
    g = doc["grid"]
    grid = SplineGrid(g["n_x"], g["n_t"], tuple(g["t_range"]), tuple(g["x_range"]))
    layers = [FoELayer(ConvOp(np.array(l["kernels"])), np.array(l["weights"]),
                       l.get("train_kernels", True)) for l in doc["layers"]]
    if len(layers) != doc["depth"]:
        raise ValueError("depth does not match the stored layers")
    return FoEModel(grid, layers)


def export_params(model: FoEModel, out_dir, n_x: int = 141, n_t: int = 5) -> list[Path]:
    """Write every kernel as a min-max normalised PGM and every activation as CSV.

    Kernels with several input channels are tiled horizontally with a one
    pixel gap.  Returns the written paths.
    """
    from .io import emit_csv, save_pgm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    xs = np.linspace(model.grid.x_range[0], model.grid.x_range[1], n_x)
    ts = np.linspace(model.grid.t_range[0], model.grid.t_range[1], n_t)
    written = []
    for i, layer in enumerate(model.layers):
        k = layer.conv.kernels
        for j in range(layer.conv.n_out):
            tiles = [np.pad(k[j, c], ((0, 0), (0, 1)), constant_values=np.nan)
                     for c in range(k.shape[1])]
            img = np.concatenate(tiles, axis=1)[:, :-1]
            lo, hi = np.nanmin(img), np.nanmax(img)
            img = np.where(np.isnan(img), lo, img)
            img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
            p = out / f"layer{i + 1}_kernel{j:02d}.pgm"
            save_pgm(img, p)
            rows = sample_activation(model.activation(i, j), xs, ts)
            q = out / f"layer{i + 1}_activation{j:02d}.csv"
            emit_csv(rows, ("x", "t_hat", "phi"), q)
            written += [p, q]
    return written
