"""Multi-channel 2D correlation with symmetric boundary padding.

Arrays are laid out as ``(batch, channels, height, width)`` and kernels as
``(n_out, n_in, k, k)`` with odd ``k``.  Symmetric padding repeats the edge
pixel (``c b a | a b c``), and :func:`conv2d_adjoint` is its exact adjoint,
including the folding of the padded border back onto the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "ConvOp",
    "pad_symmetric",
    "pad_symmetric_adjoint",
    "conv2d",
    "conv2d_adjoint",
    "conv2d_kernel_grad",
    "conv",
    "conv_t",
    "dct_filters",
    "kaiming_init",
    "identity_conv",
]


def pad_symmetric(x: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="symmetric")


def _fold_axis(g: np.ndarray, r: int, axis: int) -> np.ndarray:
    n = g.shape[axis] - 2 * r
    if r > n:
        raise ValueError(f"image of size {n} too small for padding {r}")
    core = np.take(g, np.arange(r, r + n), axis=axis).copy()
    left = np.flip(np.take(g, np.arange(r), axis=axis), axis=axis)
    right = np.flip(np.take(g, np.arange(r + n, 2 * r + n), axis=axis), axis=axis)
    lo = [slice(None)] * g.ndim
    hi = [slice(None)] * g.ndim
    lo[axis] = slice(0, r)
    hi[axis] = slice(n - r, n)
    core[tuple(lo)] += left
    core[tuple(hi)] += right
    return core


def pad_symmetric_adjoint(g: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return g
    return _fold_axis(_fold_axis(g, r, 2), r, 3)


def conv2d(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Same-size correlation of ``x`` with ``kernels`` under symmetric padding."""
    n_out, n_in, k, _ = kernels.shape
    b, c, h, w = x.shape
    if c != n_in:
        raise ValueError(f"input has {c} channels, kernels expect {n_in}")
    r = k // 2
    win = np.lib.stride_tricks.sliding_window_view(pad_symmetric(x, r), (k, k), axis=(2, 3))
    out = np.tensordot(win, kernels, axes=([1, 4, 5], [1, 2, 3]))  # (b, h, w, n_out)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_adjoint(g: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`conv2d` with respect to its input."""
    n_out, n_in, k, _ = kernels.shape
    b, o, h, w = g.shape
    if o != n_out:
        raise ValueError(f"gradient has {o} channels, kernels produce {n_out}")
    r = k // 2
    gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
    # every tap at once: (n_in * k * k, b * h * w)
    taps = (kernels.transpose(1, 2, 3, 0).reshape(-1, o) @ gm).reshape(n_in, k, k, b, h, w)
    gp = np.zeros((n_in, b, h + 2 * r, w + 2 * r))
    for p in range(k):
        for q in range(k):
            gp[:, :, p:p + h, q:q + w] += taps[:, p, q]
    return np.ascontiguousarray(pad_symmetric_adjoint(gp, r).transpose(1, 0, 2, 3))


def conv2d_kernel_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    """Gradient of ``<g, conv2d(x, K)>`` with respect to ``K``."""
    r = k // 2
    win = np.lib.stride_tricks.sliding_window_view(pad_symmetric(x, r), (k, k), axis=(2, 3))
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def conv(x, kernels):
    """Tape-aware :func:`conv2d`."""
    xv, kv = ad.value_of(x), ad.value_of(kernels)
    k = kv.shape[-1]
    return ad.apply(conv2d(xv, kv), (x, kernels),
                    (lambda g: conv2d_adjoint(g, kv), lambda g: conv2d_kernel_grad(xv, g, k)))


def conv_t(g, kernels):
    """Tape-aware :func:`conv2d_adjoint`."""
    gv, kv = ad.value_of(g), ad.value_of(kernels)
    k = kv.shape[-1]
    return ad.apply(conv2d_adjoint(gv, kv), (g, kernels),
                    (lambda u: conv2d(u, kv), lambda u: conv2d_kernel_grad(u, gv, k)))


@dataclass
class ConvOp:
    """Bias-free convolution layer with kernels ``(n_out, n_in, k, k)``."""

    kernels: np.ndarray

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=float)
        if self.kernels.ndim != 4 or self.kernels.shape[2] != self.kernels.shape[3] \
                or self.kernels.shape[2] % 2 == 0:
            raise ValueError("kernels must have shape (n_out, n_in, k, k) with odd k")

    @property
    def n_out(self) -> int:
        return self.kernels.shape[0]

    @property
    def n_in(self) -> int:
        return self.kernels.shape[1]

    @property
    def size(self) -> int:
        return self.kernels.shape[2]

    def __call__(self, x):
        return conv2d(x, self.kernels)

    def adjoint(self, g):
        return conv2d_adjoint(g, self.kernels)


def dct_filters(size: int = 7) -> ConvOp:
    """Orthonormal 2D DCT-II basis without the constant filter.

    For ``size = 7`` this yields 48 zero-mean filters of shape ``7 x 7``.
    """
    n = np.arange(size)
    basis = np.cos(np.pi * (2 * n[None, :] + 1) * n[:, None] / (2 * size))
    basis *= np.where(n == 0, np.sqrt(1.0 / size), np.sqrt(2.0 / size))[:, None]
    filters = np.einsum("up,vq->uvpq", basis, basis).reshape(size * size, size, size)
    return ConvOp(filters[1:, None])


def kaiming_init(n_out: int, n_in: int, k: int, seed: int) -> ConvOp:
    """Zero-mean normal kernels with std ``sqrt(2 / (n_in k^2))``."""
    if min(n_out, n_in, k) < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.Generator(np.random.Philox(seed))
    std = np.sqrt(2.0 / (n_in * k * k))
    return ConvOp(rng.normal(0.0, std, size=(n_out, n_in, k, k)))


def identity_conv(channels: int = 1) -> ConvOp:
    return ConvOp(np.eye(channels)[:, :, None, None])
