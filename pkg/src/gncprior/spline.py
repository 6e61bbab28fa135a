"""Quartic B-spline kernel and 2D tensor-product activation functions.

An activation maps a feature value ``x`` and a log-smoothing level ``t_hat``
to

    phi(x, t_hat) = sum_{l,o} w[l, o] k((x - mu_x[l]) / gamma_x) k((t_hat - mu_t[o]) / gamma_t)

with ``k`` the centred quartic B-spline (support ``|z| < 5/2``, C^3).

Along the feature axis the activation vanishes outside the node support.
Along the smoothing axis the weight grid is extended by repeating the edge
weights, so that weights constant in ``t_hat`` give an activation that is
exactly constant in ``t_hat`` over the whole ``[t_hat_min, t_hat_max]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from numpy.polynomial import Polynomial

__all__ = [
    "MAX_ORDER",
    "SplineGrid",
    "SplineActivation2D",
    "quartic_kernel",
    "locate",
    "spline_eval",
    "spline_weight_vjp",
    "fit_weights",
    "init_identity",
    "init_quadratic",
    "sample_activation",
]

MAX_ORDER = 3
_PAD = 5  # zero padding of the feature axis, enough for clipped centres

# Piecewise polynomials of the kernel in |z|.
_INNER = Polynomial([11, 12, -6, -12, 6]) / 24  # argument |z| + 1/2, |z| < 1/2
_MIDDLE = Polynomial([1, 4, 6, 4, -4]) / 24  # argument 3/2 - |z|, 1/2 <= |z| < 3/2
_OUTER = Polynomial([0, 0, 0, 0, 1]) / 24  # argument 5/2 - |z|, 3/2 <= |z| < 5/2


def _offset_polys():
    """Kernel value at node offset ``a`` as a polynomial of the fraction ``f``.

    With ``s = c + f``, ``c = floor(s + 1/2)`` and ``f`` in ``[-1/2, 1/2)``,
    node ``c + a`` sees the argument ``f - a``, which always falls into the
    same branch of the kernel.
    """
    f_plus = Polynomial([0.5, 1.0])
    f_minus = Polynomial([0.5, -1.0])
    base = [
        _OUTER(f_minus),  # a = -2
        _MIDDLE(f_minus),  # a = -1
        _INNER(f_plus),  # a = 0, even in f
        _MIDDLE(f_plus),  # a = +1
        _OUTER(f_plus),  # a = +2
    ]
    table = np.zeros((MAX_ORDER + 2, 5, 5))
    for a, p in enumerate(base):
        for k in range(MAX_ORDER + 2):
            c = p.deriv(k).coef if k else p.coef
            table[k, a, : c.size] = c
    return table


_COEF = _offset_polys()  # (order, offset, power)
_OFFSETS = np.arange(-2, 3)


def quartic_kernel(x, order: int = 0):
    """The quartic B-spline kernel or one of its first three derivatives.

    >>> float(quartic_kernel(0.0)) == 115 / 192
    True
    >>> float(quartic_kernel(2.5))
    0.0
    """
    if order not in (0, 1, 2, 3):
        raise ValueError(f"derivative order must be 0..3, got {order}")
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    sign = np.sign(x) ** order
    inner = _INNER.deriv(order)(ax + 0.5) if order else _INNER(ax + 0.5)
    mid = _MIDDLE.deriv(order)(1.5 - ax) * (-1) ** order if order else _MIDDLE(1.5 - ax)
    outer = _OUTER.deriv(order)(2.5 - ax) * (-1) ** order if order else _OUTER(2.5 - ax)
    val = np.select([ax < 0.5, ax < 1.5, ax < 2.5], [inner, mid, outer], 0.0)
    return sign * val if order % 2 else val


def _basis(s, order):
    """Centre index and the 5 nonzero basis values of scaled coordinate ``s``."""
    c = np.floor(s + 0.5)
    f = s - c
    coef = _COEF[order]  # (5, 5)
    # Horner over the power axis, broadcasting the 5 offsets last
    fe = f[..., None]
    val = coef[:, 4] * fe + coef[:, 3]
    val = val * fe + coef[:, 2]
    val = val * fe + coef[:, 1]
    val = val * fe + coef[:, 0]
    return c, val


@dataclass(frozen=True)
class SplineGrid:
    """Node layout shared by activations: ``n_x`` feature nodes, ``n_t`` smoothing nodes."""

    n_x: int = 63
    n_t: int = 16
    t_range: tuple[float, float] = (float(np.log(1e-4)), 0.0)
    x_range: tuple[float, float] = (-3.5, 3.5)

    def __post_init__(self):
        if self.n_x < 2 or self.n_t < 2:
            raise ValueError("spline grids need at least two nodes per axis")
        if not self.t_range[0] < self.t_range[1] or not self.x_range[0] < self.x_range[1]:
            raise ValueError("grid ranges must be increasing")
        object.__setattr__(self, "t_range", tuple(float(v) for v in self.t_range))
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))

    @property
    def gamma_x(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / (self.n_x - 1)

    @property
    def gamma_t(self) -> float:
        return (self.t_range[1] - self.t_range[0]) / (self.n_t - 1)

    @property
    def mu_x(self) -> np.ndarray:
        return self.x_range[0] + self.gamma_x * np.arange(self.n_x)

    @property
    def mu_t(self) -> np.ndarray:
        return self.t_range[0] + self.gamma_t * np.arange(self.n_t)

    def x_basis(self, x, order):
        """Indices into the padded feature axis and basis values, shape ``x.shape + (5,)``."""
        s = (np.asarray(x, dtype=float) - self.x_range[0]) / self.gamma_x
        c, val = _basis(s, order)
        # far-away inputs: every kernel argument is beyond the support anyway
        cc = np.clip(c, -3, self.n_x + 2)
        val = np.where((cc == c)[..., None], val, 0.0)
        idx = cc.astype(np.intp)[..., None] + _OFFSETS + _PAD
        if order:
            val = val / self.gamma_x**order
        return idx, val

    def t_basis(self, t_hat, order):
        """Edge-clamped node indices and basis values, shape ``t_hat.shape + (5,)``."""
        s = (np.asarray(t_hat, dtype=float) - self.t_range[0]) / self.gamma_t
        c, val = _basis(s, order)
        idx = np.clip(c.astype(np.intp)[..., None] + _OFFSETS, 0, self.n_t - 1)
        if order:
            val = val / self.gamma_t**order
        return idx, val

    def to_dict(self) -> dict:
        return {"n_x": self.n_x, "n_t": self.n_t, "t_range": list(self.t_range),
                "x_range": list(self.x_range)}


def _check_orders(dx, dt):
    if dx < 0 or dt < 0 or dx + dt > MAX_ORDER:
        raise ValueError(f"derivative orders (dx={dx}, dt={dt}) exceed total order {MAX_ORDER}")


def _contract_t(grid, weights, t_hat, dt):
    """Per-sample feature-axis weights ``V[b, c, l]``, zero-padded on ``l``."""
    tidx, tval = grid.t_basis(t_hat, dt)  # (B, 5)
    v = np.einsum("clbk,bk->bcl", weights[:, :, tidx], tval)
    return np.pad(v, ((0, 0), (0, 0), (_PAD, _PAD)))


def locate(grid: SplineGrid, x):
    """Flat interval row and fraction of every feature value of a batch.

    Rows index the per-(sample, channel) interval tables of padded width
    ``n_x + 10``.  The returned pair can be passed as ``loc`` to :func:`spline_eval` and
    :func:`spline_weight_vjp` to share the work between several partials of
    the same features.
    """
    x = np.asarray(x, dtype=float)
    b, c = x.shape[:2]
    s = (x.reshape(b, c, -1) - grid.x_range[0]) / grid.gamma_x
    cen = np.floor(s + 0.5)
    f = s - cen
    # far-away inputs land on all-zero padding rows
    np.clip(cen, -3, grid.n_x + 2, out=cen)
    cen += _PAD + (grid.n_x + 2 * _PAD) * np.arange(b * c).reshape(b, c, 1)
    return cen.astype(np.intp).ravel(), f.ravel()


@numba.njit(cache=True)
def _gather_horner(poly, rows, f, scale, out):
    for i in range(rows.size):
        r = rows[i]
        z = f[i]
        out[i] = scale * ((((poly[r, 4] * z + poly[r, 3]) * z + poly[r, 2]) * z
                           + poly[r, 1]) * z + poly[r, 0])
    return out


@numba.njit(cache=True)
def _bin_moments(bins, f, g, n_bins):
    """``m[k, j] = sum over entries in bin j of g * f**k`` for k < 5."""
    m = np.zeros((5, n_bins))
    for i in range(bins.size):
        j = bins[i]
        z = f[i]
        w = g[i]
        for k in range(5):
            m[k, j] += w
            w *= z
    return m


def _interval_polys(vpad, dx):
    """Quartic in the fraction for every interval: ``P[b, c, j, power]``.

    Interval ``j`` combines nodes ``j - 2 .. j + 2``; rows within two of the
    padded ends are never addressed by :func:`locate` and stay zero.
    """
    n = vpad.shape[-1]
    poly = np.zeros(vpad.shape[:-1] + (n, 5))
    win = np.lib.stride_tricks.sliding_window_view(vpad, 5, axis=-1)
    poly[..., 2:n - 2, :] = win @ _COEF[dx]
    return poly


def spline_eval(grid: SplineGrid, weights, x, t_hat, dx: int = 0, dt: int = 0, loc=None):
    """Batched activation partials ``d^dx/dx^dx d^dt/dt^dt phi_c(x, t_hat)``.

    Parameters
    ----------
    weights : ndarray (C, n_x, n_t)
        One weight matrix per channel.
    x : ndarray (B, C, ...)
        Features; channel ``c`` uses ``weights[c]``.
    t_hat : ndarray (B,)
        One smoothing level per batch element.
    loc : tuple, optional
        Precomputed ``locate(grid, x)``.
    """
    _check_orders(dx, dt)
    x = np.asarray(x, dtype=float)
    b, c = x.shape[:2]
    vpad = _contract_t(grid, weights, np.asarray(t_hat, dtype=float).reshape(b), dt)
    poly = _interval_polys(vpad, dx)
    rows, f = loc if loc is not None else locate(grid, x)
    out = _gather_horner(poly.reshape(-1, 5), rows, f, grid.gamma_x ** -dx, np.empty(rows.size))
    return out.reshape(x.shape)


def spline_weight_vjp(grid: SplineGrid, g, x, t_hat, dx: int = 0, dt: int = 0, loc=None):
    """Gradient of ``sum(g * spline_eval(...))`` with respect to the weights."""
    _check_orders(dx, dt)
    g = np.asarray(g, dtype=float)
    b, c = g.shape[:2]
    bins, f = loc if loc is not None else locate(grid, np.asarray(x, dtype=float).reshape(g.shape))
    n = grid.n_x + 2 * _PAD
    w = np.ascontiguousarray(g, dtype=float).ravel() * grid.gamma_x ** -dx
    moments = _bin_moments(bins, f, w, b * c * n).reshape(5, b, c, n)
    # node j + a collects the moments of interval j weighted by its polynomial
    coef = _COEF[dx]
    acc = np.zeros((b, c, n))
    for a, off in enumerate(_OFFSETS):
        lo, hi = max(0, -off), min(n, n - off)
        acc[..., lo + off:hi + off] += np.einsum("k,kbcj->bcj", coef[a], moments[..., lo:hi])
    acc = acc[:, :, _PAD:_PAD + grid.n_x]
    tidx, tval = grid.t_basis(np.asarray(t_hat, dtype=float).reshape(b), dt)
    tmat = np.zeros((b, grid.n_t))
    # edge clamping repeats indices, so accumulate rather than assign
    np.add.at(tmat, (np.arange(b)[:, None], tidx), tval)
    return np.einsum("bcl,bo->clo", acc, tmat)


class SplineActivation2D:
    """A single-channel activation: a grid and an ``(n_x, n_t)`` weight matrix."""

    def __init__(self, grid: SplineGrid, weights=None):
        self.grid = grid
        if weights is None:
            weights = np.zeros((grid.n_x, grid.n_t))
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (grid.n_x, grid.n_t):
            raise ValueError(f"weights must have shape {(grid.n_x, grid.n_t)}")
        if not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite")
        self.weights = weights

    def __call__(self, x, t_hat, dx: int = 0, dt: int = 0):
        return self.eval(x, t_hat, dx, dt)

    def eval(self, x, t_hat, dx: int = 0, dt: int = 0):
        """Partial derivative of the activation at ``(x, t_hat)``; broadcasts."""
        x, t_hat = np.broadcast_arrays(np.asarray(x, float), np.asarray(t_hat, float))
        flat_x, flat_t = x.reshape(-1, 1), t_hat.reshape(-1)
        out = spline_eval(self.grid, self.weights[None], flat_x, flat_t, dx, dt)
        return out.reshape(x.shape) if x.ndim else float(out[0, 0])

    def weight_gradient(self, x, t_hat, dx: int = 0, dt: int = 0) -> np.ndarray:
        """Matrix ``M`` with ``eval(x, t_hat, dx, dt) == sum(weights * M)``."""
        x = np.asarray(x, float).reshape(1, 1)
        t = np.asarray(t_hat, float).reshape(1)
        return spline_weight_vjp(self.grid, np.ones((1, 1)), x, t, dx, dt)[0]


def fit_weights(grid: SplineGrid, fn, n_samples: int = 4001) -> np.ndarray:
    """Least-squares feature-axis weights for ``fn``, repeated along ``t_hat``.

    Samples are taken where the basis is complete (two node spacings inside
    the node interval); there the quartic B-splines reproduce polynomials up
    to degree four exactly, so identity and quadratic fits carry no boundary
    ringing.  The smoothing axis is a partition of unity, so the result is
    constant in ``t_hat``.
    """
    lo, hi = grid.x_range
    if grid.n_x > 6:
        lo, hi = lo + 2 * grid.gamma_x, hi - 2 * grid.gamma_x
    xs = np.linspace(lo, hi, n_samples)
    idx, val = grid.x_basis(xs, 0)
    design = np.zeros((n_samples, grid.n_x + 2 * _PAD))
    np.put_along_axis(design, idx, val, axis=1)
    design = design[:, _PAD:_PAD + grid.n_x]
    coef, *_ = np.linalg.lstsq(design, fn(xs), rcond=None)
    return np.repeat(coef[:, None], grid.n_t, axis=1)


def init_identity(grid: SplineGrid) -> SplineActivation2D:
    return SplineActivation2D(grid, fit_weights(grid, lambda x: x))


def init_quadratic(grid: SplineGrid) -> SplineActivation2D:
    return SplineActivation2D(grid, fit_weights(grid, lambda x: 0.5 * x**2))


def sample_activation(act: SplineActivation2D, xs, t_hats) -> list[tuple[float, float, float]]:
    """Rows ``(x, t_hat, phi)`` sampled on a feature grid for each smoothing level."""
    xs = np.asarray(xs, float)
    rows = []
    for t in np.asarray(t_hats, float):
        vals = act.eval(xs, np.full_like(xs, t))
        rows.extend(zip(xs.tolist(), [float(t)] * xs.size, vals.tolist()))
    return rows
