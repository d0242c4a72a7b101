"""Weighted Frechet means: the streaming geodesic estimator and an iterative reference."""
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DomainError, NumericalError
from .manifolds import SPD, Sphere

RAW_FLOOR = 1e-6
ORACLE_TOL = 1e-10
ORACLE_MAX_ITER = 200


@dataclass
class ConvexWeights:
    """Convex weights stored through their square roots.

    ``raw`` is unconstrained; the weights are ``raw**2 / sum(raw**2)``.
    """

    raw: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=float)
        if self.raw.ndim != 1 or self.raw.size == 0:
            raise DomainError("raw weights must be a non-empty vector")

    def __len__(self):
        return self.raw.size

    @property
    def weights(self):
        sq = self.raw * self.raw
        return sq / sq.sum()

    @classmethod
    def from_weights(cls, w):
        w = np.asarray(w, dtype=float)
        if np.any(w <= 0):
            raise DomainError("convex weights must be strictly positive")
        return cls(np.sqrt(w / w.sum()))

    @classmethod
    def uniform_init(cls, rng, length):
        return cls(rng.uniform(0.5, 1.5, size=length))

    def floored(self):
        return ConvexWeights(floor_raw(self.raw))


def floor_raw(raw):
    """Keep every raw value at least ``RAW_FLOOR`` in magnitude, preserving sign (0 -> +)."""
    sign = np.where(raw < 0, -1.0, 1.0)
    return sign * np.maximum(np.abs(raw), RAW_FLOOR)


def normalized_weights(raw):
    """``raw**2`` normalized along the last axis; accepts recorded values."""
    sq = ad.square(raw)
    return ad.div(sq, ad.sum(sq, axis=-1, keepdims=True))


def step_fractions(raw):
    """Geodesic step sizes ``w(n) / sum_{j<=n} w(j)`` of the streaming estimator.

    The normalization of the weights cancels, so these are computed from
    ``raw**2`` directly. The first entry is always 1.
    """
    sq = ad.square(raw)
    return ad.div(sq, ad.cumsum(sq, axis=-1))


def infer_manifold(points):
    points = np.asarray(points)
    if points.ndim >= 3 and points.shape[-1] == points.shape[-2]:
        return SPD(points.shape[-1])
    if points.ndim >= 2:
        return Sphere(points.shape[-1])
    raise DomainError(f"cannot infer manifold from point array of shape {points.shape}")


def _as_weights(weights, length):
    if isinstance(weights, ConvexWeights):
        w = weights.weights
    else:
        w = np.asarray(weights, dtype=float)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise DomainError("weights must be positive and sum to 1")
    if w.shape != (length,):
        raise DomainError(f"expected {length} weights, got {w.shape}")
    return w


def _prepare(points, weights, manifold):
    points = np.asarray(points, dtype=float)
    if points.ndim == 0 or points.shape[0] == 0:
        raise DomainError("need at least one point")
    manifold = manifold or infer_manifold(points)
    manifold.check_points(points)
    return points, _as_weights(weights, points.shape[0]), manifold


def recursive_wfm(points, weights, manifold=None):
    """Streaming weighted Frechet mean.

    Starting from ``M_0 = P_0``, each later point pulls the estimate along the
    geodesic ``M_n = Gamma(M_{n-1}, P_n; w(n) / sum_{j<=n} w(j))``.

    Parameters
    ----------
    points : ndarray, shape (L, *point_shape)
        Points in processing order.
    weights : ConvexWeights or array_like, shape (L,)
    manifold : SPD or Sphere, optional
        Inferred from the point shape when omitted.

    Returns
    -------
    ndarray
        The estimate ``M_{L-1}``.
    """
    points, w, manifold = _prepare(points, weights, manifold)
    if isinstance(manifold, Sphere) and points.shape[0] > 1:
        diam = np.max(manifold.dist(points[:, None], points[None, :]))
        if diam > np.pi / 2:
            warnings.warn(f"input diameter {diam:.3f} exceeds pi/2; the weighted mean may not be unique",
                          RuntimeWarning, stacklevel=2)
    t = w / np.cumsum(w)
    M = points[0].copy()
    for n in range(1, points.shape[0]):
        M = manifold.geodesic(M, points[n], t[n])
    return M


def weighted_variance(points, weights, M, manifold=None):
    """``sum_i w(i) d^2(P_i, M)``."""
    points, w, manifold = _prepare(points, weights, manifold)
    M = np.asarray(M, dtype=float)
    if M.shape != points.shape[1:]:
        raise DomainError(f"dimension mismatch: point shape {points.shape[1:]} vs mean shape {M.shape}")
    return float(np.sum(w * manifold.dist2(points, M[None])))


def exact_wfm_oracle(points, weights, tol=ORACLE_TOL, max_iter=ORACLE_MAX_ITER, manifold=None):
    """Weighted Frechet mean by Riemannian fixed-point iteration.

    Iterates ``M <- exp_M(sum_i w(i) log_M(P_i))`` from the heaviest point until the
    update norm (half the norm of the weighted-variance gradient) is below ``tol / 2``.
    """
    if tol <= 0:
        raise DomainError("tol must be positive")
    points, w, manifold = _prepare(points, weights, manifold)
    M = points[int(np.argmax(w))].copy()
    wb = w.reshape((-1,) + (1,) * len(manifold.point_shape))
    for _ in range(max_iter):
        V = np.sum(wb * manifold.log(M[None], points), axis=0)
        if manifold.norm(M, V) < 0.5 * tol:
            return M
        M = manifold.exp(M, V)
    raise NumericalError(f"Frechet mean iteration did not reach tol={tol} in {max_iter} steps")
