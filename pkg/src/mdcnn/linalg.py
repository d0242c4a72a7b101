"""Symmetric eigendecomposition by cyclic Jacobi rotations, and SPD matrix functions.

Everything here works on stacks of matrices of shape ``(..., n, n)``; each Jacobi
rotation is applied to the whole stack at once.
"""
import numpy as np

from .errors import DomainError, NumericalError

EIG_TOL = 1e-14
MAX_SWEEPS = 100
EIG_FLOOR = 1e-12


def check_symmetric(A, rtol=1e-12):
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise DomainError(f"expected square matrices, got shape {A.shape}")
    scale = np.max(np.abs(A), axis=(-2, -1))
    asym = np.max(np.abs(A - np.swapaxes(A, -1, -2)), axis=(-2, -1))
    if np.any(asym > rtol * scale):
        raise DomainError(f"matrix is not symmetric (max asymmetry {np.max(asym):.3e})")
    return A


def sym_eig(A, tol=EIG_TOL, max_sweeps=MAX_SWEEPS, check=True):
    """Eigendecomposition of symmetric matrices by cyclic threshold Jacobi.

    Parameters
    ----------
    A : ndarray, shape (..., n, n)
        Symmetric matrices.
    tol : float
        Sweeps stop once the off-diagonal Frobenius norm of every matrix is
        below ``tol * ||A||_F``.
    max_sweeps : int
        Iteration cap; exceeding it raises :class:`NumericalError`.
    check : bool
        Validate symmetry first. Internal callers that symmetrize their own
        inputs skip this.

    Returns
    -------
    eigvals : ndarray, shape (..., n)
        Eigenvalues in ascending order.
    eigvecs : ndarray, shape (..., n, n)
        Orthogonal matrices whose columns are the matching eigenvectors.
    """
    if check:
        A = check_symmetric(A)
    else:
        A = np.asarray(A, dtype=float)
    n = A.shape[-1]
    batch_shape = A.shape[:-2]
    if not np.all(np.isfinite(A)):
        raise NumericalError("non-finite entries in eigensolver input")
    # work in (n, n, batch) layout so each rotation updates contiguous rows
    a = np.moveaxis(A.reshape(-1, n, n), 0, -1).copy(order="C")
    v = np.broadcast_to(np.eye(n)[:, :, None], a.shape).copy()

    thresh = tol * np.sqrt(np.sum(a * a, axis=(0, 1)))
    skip = thresh / max(n, 1)
    iu = np.triu_indices(n, 1)
    pairs = list(zip(*iu))
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(a[iu[0], iu[1]] ** 2, axis=0))
        active = off > thresh
        if not active.any():
            break
        if active.all():
            _sweep(a, v, pairs, skip)
        else:
            sel = np.nonzero(active)[0]
            a_s, v_s = a[:, :, sel], v[:, :, sel]
            _sweep(a_s, v_s, pairs, skip[sel])
            a[:, :, sel], v[:, :, sel] = a_s, v_s
    else:
        raise NumericalError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")

    w = np.diagonal(a, axis1=0, axis2=1)
    v = np.moveaxis(v, -1, 0)
    order = np.argsort(w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    return w.reshape(batch_shape + (n,)), v.reshape(batch_shape + (n, n))


def _sweep(a, v, pairs, skip):
    for p, q in pairs:
        apq = a[p, q]
        rotate = np.abs(apq) > skip
        if not rotate.any():
            continue
        safe = np.where(rotate, apq, 1.0)
        theta = (a[q, q] - a[p, p]) / (2.0 * safe)
        t = np.copysign(1.0, theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
        c = 1.0 / np.sqrt(t * t + 1.0)
        s = t * c
        c = np.where(rotate, c, 1.0)
        s = np.where(rotate, s, 0.0)

        cp, cq = a[:, p].copy(), a[:, q].copy()
        a[:, p] = c * cp - s * cq
        a[:, q] = s * cp + c * cq
        rp, rq = a[p].copy(), a[q].copy()
        a[p] = c * rp - s * rq
        a[q] = s * rp + c * rq
        # exact zero keeps later sweeps from re-rotating this pair needlessly
        a[p, q] = np.where(rotate, 0.0, a[p, q])
        a[q, p] = a[p, q]

        vp, vq = v[:, p].copy(), v[:, q].copy()
        v[:, p] = c * vp - s * vq
        v[:, q] = s * vp + c * vq


def symmetrize(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def eig_apply(eigvals, eigvecs, values):
    """Rebuild ``V diag(values) V^T`` as an exactly symmetric matrix."""
    out = (eigvecs * values[..., None, :]) @ np.swapaxes(eigvecs, -1, -2)
    return symmetrize(out)


def spd_function(A, func, check=True):
    """Apply a scalar function to the (floored) spectrum of SPD matrices."""
    w, v = sym_eig(A, check=check)
    return eig_apply(w, v, func(np.maximum(w, EIG_FLOOR)))


def sqrtm(A):
    return spd_function(A, np.sqrt)


def invsqrtm(A):
    return spd_function(A, lambda w: 1.0 / np.sqrt(w))


def logm(A):
    return spd_function(A, np.log)


def expm_sym(A):
    """Matrix exponential of a symmetric (not necessarily definite) matrix."""
    w, v = sym_eig(A)
    return eig_apply(w, v, np.exp(w))


def powm(A, t):
    return spd_function(A, lambda w: w ** t)
