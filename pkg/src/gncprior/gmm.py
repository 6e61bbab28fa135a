"""Smoothed Gaussian-mixture energies and their convexity analysis.

The energy of a mixture density ``p`` smoothed by an isotropic Gaussian of
variance ``t`` is

    F(x, t) = -log sum_i w_i N(x; mu_i, Sigma_i + t I)

which is again a mixture, so value, gradient and Hessian are available in
closed form.  Everything here is evaluated in log-space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "GaussianMixture",
    "ConvexityReport",
    "NotConvexError",
    "five_mode_mixture",
    "smoothed_energy",
    "energy_batch",
    "convexity_threshold_bound",
    "numeric_convexity_threshold",
    "convexity_report",
]


class NotConvexError(ValueError):
    """Raised when no candidate smoothing makes the energy convex on the grid."""


@dataclass(frozen=True)
class GaussianMixture:
    """Weights, means and (possibly singular) covariances of a mixture.

    Zero covariance matrices are allowed; they encode Dirac components of an
    empirical measure, which become proper Gaussians once smoothed.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.asarray(self.means, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        n, d = mu.shape
        cov = np.asarray(self.covariances, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(n, 1, 1)
        if w.shape != (n,) or cov.shape != (n, d, d):
            raise ValueError(
                f"inconsistent shapes: weights {w.shape}, means {mu.shape}, "
                f"covariances {cov.shape}"
            )
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to one")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=0, atol=1e-12):
            raise ValueError("covariances must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-12:
            raise ValueError("covariances must be positive semi-definite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def isotropic_1d(cls, weights, means, variances) -> "GaussianMixture":
        """Build a one-dimensional mixture from scalar variances."""
        v = np.asarray(variances, dtype=float)
        return cls(weights, np.asarray(means, dtype=float)[:, None], v.reshape(-1, 1, 1))

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussianMixture":
        return cls(doc["weights"], doc["means"], doc["covariances"])

    @classmethod
    def from_json(cls, path) -> "GaussianMixture":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` samples, shape ``(n, d)``."""
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        # eigen-factorisation tolerates singular covariances
        lam, vec = np.linalg.eigh(self.covariances)
        root = vec * np.sqrt(np.clip(lam, 0, None))[:, None, :]
        return self.means[comp] + np.einsum("nij,nj->ni", root[comp], z)


def five_mode_mixture() -> GaussianMixture:
    """The five-component 1D mixture used throughout the GNC experiments.

    Its global energy minimum for small smoothing sits at x = 1/2.
    """
    return GaussianMixture.isotropic_1d(
        weights=[0.05, 0.15, 0.15, 0.60, 0.05],
        means=[-1.0, -0.5, 0.0, 0.5, 1.0],
        variances=[0.10, 0.01, 0.05, 0.01, 0.10],
    )


def energy_batch(gmm: GaussianMixture, x, t: float, hessian: bool = True):
    """Vectorised smoothed energy at many points.

    Parameters
    ----------
    gmm : GaussianMixture
    x : array_like, shape (N, d) or (N,) for d = 1
    t : float
        Smoothing variance, strictly positive.
    hessian : bool
        Skip the Hessian when only value and gradient are needed.

    Returns
    -------
    value : ndarray (N,)
    grad : ndarray (N, d)
    hess : ndarray (N, d, d) or None
    """
    if not t > 0:
        raise ValueError(f"smoothing t must be positive, got {t}")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1 and gmm.dim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] != gmm.dim:
        raise ValueError(f"points of shape {x.shape} do not match dimension {gmm.dim}")
    d = gmm.dim
    cov = gmm.covariances + t * np.eye(d)
    chol = np.linalg.cholesky(cov)  # (n, d, d)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    cov_inv = np.linalg.inv(cov)

    diff = x[:, None, :] - gmm.means[None, :, :]  # (N, n, d)
    r = np.einsum("kij,nkj->nki", cov_inv, diff)
    maha = np.einsum("nki,nki->nk", diff, r)
    with np.errstate(divide="ignore"):
        logw = np.log(gmm.weights)
    logc = logw - 0.5 * maha - 0.5 * (logdet + d * np.log(2 * np.pi))
    logf = logsumexp(logc, axis=1)
    resp = np.exp(logc - logf[:, None])  # posterior component weights

    value = -logf
    grad = np.einsum("nk,nki->ni", resp, r)
    if not hessian:
        return value, grad, None
    hess = (
        np.einsum("nk,kij->nij", resp, cov_inv)
        - np.einsum("nk,nki,nkj->nij", resp, r, r)
        + grad[:, :, None] * grad[:, None, :]
    )
    return value, grad, hess


def smoothed_energy(gmm: GaussianMixture, x, t: float):
    """Value, gradient and Hessian of the smoothed energy at one point.

    >>> gmm = GaussianMixture.isotropic_1d([1.0], [0.0], [0.0])
    >>> v, g, h = smoothed_energy(gmm, 2.0, 4.0)
    >>> round(float(g[0]), 12), round(float(h[0, 0]), 12)
    (0.5, 0.25)
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (gmm.dim,):
        raise ValueError(f"point of shape {x.shape} does not match dimension {gmm.dim}")
    v, g, h = energy_batch(gmm, x[None, :], t)
    return float(v[0]), g[0], h[0]


def _min_curvature(gmm: GaussianMixture, grid: np.ndarray, t: float) -> float:
    _, _, h = energy_batch(gmm, grid, t)
    if gmm.dim == 1:
        return float(h[:, 0, 0].min())
    return float(np.linalg.eigvalsh(h)[:, 0].min())


def convexity_threshold_bound(gmm: GaussianMixture, lower, upper) -> float:
    """Smoothing that provably makes the energy convex on a box.

    Convexity holds once ``t >= |x - mu_i|^2`` for every component and every
    x in the box.  The squared distance is convex in x, so its maximum over
    the box is attained at a corner.
    """
    lo = np.atleast_1d(np.asarray(lower, dtype=float))
    hi = np.atleast_1d(np.asarray(upper, dtype=float))
    if lo.shape != (gmm.dim,) or hi.shape != (gmm.dim,):
        raise ValueError("box bounds must match the mixture dimension")
    if np.any(hi < lo):
        raise ValueError("empty domain")
    corners = np.array(list(product(*zip(lo, hi))))
    dist2 = ((corners[:, None, :] - gmm.means[None, :, :]) ** 2).sum(axis=-1)
    return float(dist2.max())


def numeric_convexity_threshold(gmm: GaussianMixture, grid, t_candidates, tol: float = 1e-9):
    """Smallest candidate smoothing above which the energy is convex on a grid.

    Candidates are scanned from the largest down; the returned threshold is
    the last candidate of the leading run for which the smallest Hessian
    eigenvalue over ``grid`` is at least ``-tol``.

    Returns
    -------
    threshold : float
    curve : ndarray, shape (len(t_candidates), 2)
        Columns ``(t, min_eigenvalue)`` for every candidate.

    Raises
    ------
    NotConvexError
        If the largest candidate is already non-convex.
    """
    ts = np.asarray(t_candidates, dtype=float).reshape(-1)
    if ts.size == 0 or np.any(np.diff(ts) >= 0):
        raise ValueError("t_candidates must be a non-empty strictly decreasing list")
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    if grid.shape[0] == 0:
        raise ValueError("grid must be non-empty")
    curve = np.array([[t, _min_curvature(gmm, grid, t)] for t in ts])
    convex = curve[:, 1] >= -tol
    if not convex[0]:
        raise NotConvexError("none convex in range")
    n_lead = len(convex) if convex.all() else int(np.argmin(convex))
    return float(ts[n_lead - 1]), curve


@dataclass
class ConvexityReport:
    bound_t: float
    numeric_t: float
    grid_spec: dict = field(default_factory=dict)
    curve: np.ndarray | None = None


def convexity_report(gmm: GaussianMixture, lower, upper, points_per_axis: int = 2001,
                     t_candidates=None) -> ConvexityReport:
    """Compare the proof bound with a grid sweep on an axis-aligned box."""
    lo = np.atleast_1d(np.asarray(lower, dtype=float))
    hi = np.atleast_1d(np.asarray(upper, dtype=float))
    bound = convexity_threshold_bound(gmm, lo, hi)
    axes = [np.linspace(a, b, points_per_axis) for a, b in zip(lo, hi)]
    grid = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    if t_candidates is None:
        t_candidates = np.logspace(np.log10(bound), -4, 121)
    numeric, curve = numeric_convexity_threshold(gmm, grid, t_candidates)
    spec = {"lower": lo.tolist(), "upper": hi.tolist(), "points_per_axis": points_per_axis}
    return ConvexityReport(bound_t=bound, numeric_t=numeric, grid_spec=spec, curve=curve)
