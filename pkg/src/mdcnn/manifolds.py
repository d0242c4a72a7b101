"""Riemannian primitives for the SPD manifold (affine-invariant metric) and the unit sphere.

The :class:`SPD` and :class:`Sphere` methods operate on stacks of points (leading
batch axes) and are built from :mod:`mdcnn.autodiff` ops, so they accept either
plain arrays or recorded ``Var`` values. The module-level ``spd_*`` / ``sphere_*``
functions are the validated single-point API.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DegenerateGeodesicError, DomainError
from .linalg import check_symmetric, expm_sym, sym_eig

ANTIPODAL_TOL = 1e-8


class SPD:
    """Symmetric positive definite ``n x n`` matrices with the affine-invariant metric."""

    kind = "spd"
    code = 0

    def __init__(self, n):
        if n < 1:
            raise DomainError("SPD dimension must be positive")
        self.n = int(n)
        self.point_shape = (self.n, self.n)
        self.dim = self.n

    def __eq__(self, other):
        return isinstance(other, SPD) and other.n == self.n

    def __hash__(self):
        return hash(("spd", self.n))

    def __repr__(self):
        return f"SPD({self.n})"

    def check_points(self, X):
        X = np.asarray(X, dtype=float)
        if X.shape[-2:] != self.point_shape:
            raise DomainError(f"expected SPD({self.n}) points, got trailing shape {X.shape[-2:]}")
        if X.size == 0:
            return X
        check_symmetric(X)
        w, _ = sym_eig(X, check=False)
        if np.any(w[..., 0] <= 0):
            raise DomainError(f"matrix is not positive definite (min eigenvalue {w[..., 0].min():.3e})")
        return X

    def dist2(self, X, Y):
        Xi = ad.matfun(X, "invsqrt")
        C = ad.symmetrize(ad.matmul(ad.matmul(Xi, Y), Xi))
        L = ad.matfun(C, "log")
        return ad.sum(ad.square(L), axis=(-2, -1))

    def dist(self, X, Y):
        return ad.sqrt(self.dist2(X, Y))

    def geodesic(self, X, Y, t):
        """Point at fraction ``t`` along the geodesic from ``X`` to ``Y``.

        ``t`` broadcasts against the stack shape of ``X`` and ``Y``.
        """
        e = ad.eig_of(X)
        S = ad.matfun(X, "sqrt", e)
        Si = ad.matfun(X, "invsqrt", e)
        C = ad.symmetrize(ad.matmul(ad.matmul(Si, Y), Si))
        Ct = ad.matpow(C, t)
        return ad.symmetrize(ad.matmul(ad.matmul(S, Ct), S))

    def log(self, base, X):
        e = ad.eig_of(base)
        S = ad.matfun(base, "sqrt", e)
        Si = ad.matfun(base, "invsqrt", e)
        C = ad.symmetrize(ad.matmul(ad.matmul(Si, X), Si))
        return ad.symmetrize(ad.matmul(ad.matmul(S, ad.matfun(C, "log")), S))

    def exp(self, base, V):
        e = ad.eig_of(base)
        S = ad.matfun(base, "sqrt", e)
        Si = ad.matfun(base, "invsqrt", e)
        C = ad.symmetrize(ad.matmul(ad.matmul(Si, V), Si))
        return ad.symmetrize(ad.matmul(ad.matmul(S, ad.matfun(C, "exp")), S))

    def norm(self, base, V):
        """Riemannian norm of tangent vector ``V`` at ``base``."""
        Si = ad.matfun(base, "invsqrt")
        C = ad.matmul(ad.matmul(Si, V), Si)
        return ad.sqrt(ad.sum(ad.square(C), axis=(-2, -1)))

    def act(self, A, X):
        """Congruence action ``A X A^T``."""
        return ad.symmetrize(ad.matmul(ad.matmul(A, X), ad.swap_last(A)))

    def base_point(self):
        return np.eye(self.n)

    def tangent_size(self):
        return self.n * (self.n + 1) // 2

    def tangent_coords(self, X):
        """Matrix log at the identity, flattened to the upper triangle.

        Off-diagonal entries are scaled by sqrt(2) so the flat inner product equals
        the Frobenius inner product.
        """
        L = ad.matfun(X, "log")
        iu = np.triu_indices(self.n)
        scale = np.where(iu[0] == iu[1], 1.0, np.sqrt(2.0))
        return ad.mul(L[(Ellipsis,) + iu], scale)

    def random_point(self, rng, size=(), spread=1.0):
        """Matrix exponential of a random symmetric matrix with entries of scale ``spread``."""
        G = rng.normal(size=_size(size) + self.point_shape)
        return expm_sym(0.5 * spread * (G + np.swapaxes(G, -1, -2)))

    def random_isometry(self, rng, log_sv=1.0):
        """Random congruence ``A = U diag(s) W^T`` with log singular values in ``[-log_sv, log_sv]``."""
        U, _ = np.linalg.qr(rng.normal(size=(self.n, self.n)))
        W, _ = np.linalg.qr(rng.normal(size=(self.n, self.n)))
        s = np.exp(rng.uniform(-log_sv, log_sv, size=self.n))
        return IsometryElement("congruence", (U * s) @ W.T)


def _size(size):
    return (size,) if isinstance(size, (int, np.integer)) else tuple(size)


class Sphere:
    """Unit sphere in ``R^m`` (ambient dimension ``m``) with the great-circle metric."""

    kind = "sphere"
    code = 1

    def __init__(self, m):
        if m < 2:
            raise DomainError("sphere ambient dimension must be at least 2")
        self.m = int(m)
        self.point_shape = (self.m,)
        self.dim = self.m

    def __eq__(self, other):
        return isinstance(other, Sphere) and other.m == self.m

    def __hash__(self):
        return hash(("sphere", self.m))

    def __repr__(self):
        return f"Sphere({self.m})"

    def check_points(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != self.point_shape:
            raise DomainError(f"expected points in R^{self.m}, got trailing shape {x.shape[-1:]}")
        if x.size and np.max(np.abs(np.linalg.norm(x, axis=-1) - 1.0)) > 1e-12:
            raise DomainError("sphere point does not have unit norm")
        return x

    @staticmethod
    def _norm(v):
        return ad.sqrt(ad.sum(ad.square(v), axis=-1))

    def _renormalize(self, v):
        n = self._norm(v)
        return ad.div(v, ad.reshape(n, ad.value(n).shape + (1,)))

    def _angle(self, x, y):
        # 2*atan2(|x-y|, |x+y|) stays accurate near 0 and pi, unlike arccos of the dot product
        a = self._norm(ad.sub(x, y))
        b = self._norm(ad.add(x, y))
        return ad.mul(2.0, ad.atan2(a, b)), b

    def dist(self, x, y):
        return self._angle(x, y)[0]

    def dist2(self, x, y):
        return ad.square(self.dist(x, y))

    def _check_antipodal(self, plus_norm):
        if np.any(ad.value(plus_norm) < ANTIPODAL_TOL):
            raise DegenerateGeodesicError("antipodal points: the shortest geodesic is not unique")

    def geodesic(self, x, y, t):
        theta, plus = self._angle(x, y)
        self._check_antipodal(plus)
        s = ad.sub(1.0, t)
        den = ad.sinc(theta)
        a = ad.div(ad.mul(s, ad.sinc(ad.mul(s, theta))), den)
        b = ad.div(ad.mul(t, ad.sinc(ad.mul(t, theta))), den)
        out = ad.add(ad.mul(ad.reshape(a, ad.value(a).shape + (1,)), x),
                     ad.mul(ad.reshape(b, ad.value(b).shape + (1,)), y))
        return self._renormalize(out)

    def log(self, x, y):
        theta, plus = self._angle(x, y)
        self._check_antipodal(plus)
        c = ad.sum(ad.mul(x, y), axis=-1, keepdims=True)
        v = ad.sub(y, ad.mul(c, x))
        den = ad.sinc(theta)
        return ad.div(v, ad.reshape(den, ad.value(den).shape + (1,)))

    def exp(self, x, v):
        r = self._norm(v)
        rr = ad.reshape(r, ad.value(r).shape + (1,))
        out = ad.add(ad.mul(ad.cos(rr), x), ad.mul(ad.sinc(rr), v))
        return self._renormalize(out)

    def norm(self, base, v):
        return self._norm(v)

    def act(self, Q, x):
        return ad.reshape(ad.matmul(Q, ad.reshape(x, ad.value(x).shape + (1,))), ad.value(x).shape)

    def base_point(self):
        e = np.zeros(self.m)
        e[0] = 1.0
        return e

    def tangent_size(self):
        return self.m

    def tangent_coords(self, x):
        return self.log(self.base_point(), x)

    def random_point(self, rng, size=()):
        x = rng.normal(size=_size(size) + self.point_shape)
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    def random_isometry(self, rng):
        Q, R = np.linalg.qr(rng.normal(size=(self.m, self.m)))
        Q = Q * np.sign(np.diag(R))
        return IsometryElement("rotation", Q)


def manifold_from(kind, dim):
    if kind in ("spd", 0):
        return SPD(dim)
    if kind in ("sphere", 1):
        return Sphere(dim)
    raise DomainError(f"unknown manifold kind {kind!r}")


@dataclass(frozen=True)
class IsometryElement:
    """An isometry: congruence ``X -> A X A^T`` on SPD or rotation ``x -> Q x`` on the sphere."""

    kind: str
    matrix: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.matrix, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DomainError("isometry matrix must be square")
        if self.kind == "congruence":
            if abs(np.linalg.det(A)) <= 1e-10:
                raise DomainError("congruence matrix is singular")
        elif self.kind == "rotation":
            if np.linalg.norm(A.T @ A - np.eye(A.shape[0])) > 1e-10:
                raise DomainError("rotation matrix is not orthogonal")
        else:
            raise DomainError(f"unknown isometry kind {self.kind!r}")
        object.__setattr__(self, "matrix", A)

    def apply(self, points):
        """Act on a stack of points (any leading shape)."""
        A = self.matrix
        points = np.asarray(points, dtype=float)
        if self.kind == "congruence":
            return SPD(A.shape[0]).act(A, points)
        return points @ A.T


# --- validated single-point API ---------------------------------------------

def _spd_pair(X, Y):
    X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
    if X.ndim != 2 or X.shape != Y.shape:
        raise DomainError(f"dimension mismatch: {X.shape} vs {Y.shape}")
    M = SPD(X.shape[0])
    return M, M.check_points(X), M.check_points(Y)


def spd_dist(X, Y):
    M, X, Y = _spd_pair(X, Y)
    return float(M.dist(X, Y))


def spd_geodesic(X, Y, t):
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"geodesic parameter t={t} outside [0, 1]")
    M, X, Y = _spd_pair(X, Y)
    return M.geodesic(X, Y, t)


def spd_log(base, X):
    M, base, X = _spd_pair(base, X)
    return M.log(base, X)


def spd_exp(base, V):
    base, V = np.asarray(base, dtype=float), np.asarray(V, dtype=float)
    if base.shape != V.shape:
        raise DomainError(f"dimension mismatch: {base.shape} vs {V.shape}")
    M = SPD(base.shape[0])
    M.check_points(base)
    check_symmetric(V, rtol=1e-10)
    return M.exp(base, V)


def spd_act(g, X):
    M = SPD(np.asarray(X).shape[0])
    X = M.check_points(X)
    A = g.matrix if isinstance(g, IsometryElement) else IsometryElement("congruence", g).matrix
    if A.shape != X.shape:
        raise DomainError(f"dimension mismatch: {A.shape} vs {X.shape}")
    return M.act(A, X)


def _sphere_pair(x, y):
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise DomainError(f"dimension mismatch: {x.shape} vs {y.shape}")
    S = Sphere(x.shape[0])
    return S, S.check_points(x), S.check_points(y)


def sphere_dist(x, y):
    S, x, y = _sphere_pair(x, y)
    return float(S.dist(x, y))


def sphere_geodesic(x, y, t):
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"geodesic parameter t={t} outside [0, 1]")
    S, x, y = _sphere_pair(x, y)
    return S.geodesic(x, y, t)


def sphere_log(x, y):
    S, x, y = _sphere_pair(x, y)
    return S.log(x, y)


def sphere_exp(x, v):
    x, v = np.asarray(x, dtype=float), np.asarray(v, dtype=float)
    if x.shape != v.shape:
        raise DomainError(f"dimension mismatch: {x.shape} vs {v.shape}")
    S = Sphere(x.shape[0])
    S.check_points(x)
    return S.exp(x, v)


def sphere_act(Q, x):
    S = Sphere(np.asarray(x).shape[0])
    x = S.check_points(x)
    Q = Q.matrix if isinstance(Q, IsometryElement) else IsometryElement("rotation", Q).matrix
    if Q.shape[0] != x.shape[0]:
        raise DomainError(f"dimension mismatch: {Q.shape} vs {x.shape}")
    return S.act(Q, x)
