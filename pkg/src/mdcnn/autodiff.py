"""Tape-based reverse-mode differentiation over numpy arrays.

A :class:`DiffRecord` is an append-only list of nodes. Every op below accepts
``Var`` or plain ``ndarray`` arguments; when no argument is a ``Var`` the op is
evaluated directly with numpy and nothing is recorded, so geometric code can be
written once and used both for inference and for training.

Matrix functions of SPD matrices (square root, inverse square root, log, exp,
power) are single nodes whose adjoint uses the Daleckii-Krein divided-difference
form built from the forward eigendecomposition. When two eigenvalues of a matrix
are closer than ``GAP_GUARD * ||A||_F`` that matrix falls back to a symmetrized
central finite difference, and the event is counted in ``record.diagnostics``.
"""
import numpy as np

from .linalg import EIG_FLOOR, eig_apply, sym_eig

GAP_GUARD = 1e-8
FD_STEP = 6e-6


class DiffRecord:
    """Append-only record of primitive operations with per-node adjoint slots."""

    def __init__(self):
        self.nodes = []
        self.diagnostics = {"fd_fallback_nodes": 0, "fd_fallback_matrices": 0}

    def param(self, value, name=None):
        return Var(np.array(value, dtype=float), self, name=name)

    def _push(self, node):
        self.nodes.append(node)
        return node

    def backward(self, loss):
        """Propagate adjoints from the scalar ``loss`` to every node before it."""
        if loss.record is not self:
            raise ValueError("loss was not produced by this record")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            grads = node.vjp(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not isinstance(parent, Var):
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=float, copy=True).reshape(parent.value.shape)
                else:
                    parent.grad = parent.grad + g


class Var:
    __slots__ = ("value", "record", "parents", "vjp", "grad", "name", "op", "eig")
    __array_priority__ = 100

    def __init__(self, value, record, parents=(), vjp=None, name=None, op="leaf"):
        self.value = value
        self.record = record
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.name = name
        self.op = op
        self.eig = None
        record._push(self)

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return getitem(self, key)


def value(x):
    return x.value if isinstance(x, Var) else x


def _record(*args):
    for a in args:
        if isinstance(a, Var):
            return a.record
    return None


def _node(rec, out, parents, vjp, op):
    return Var(out, rec, parents, vjp, op=op)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _shape(x):
    return np.shape(value(x))


# --- elementwise arithmetic -------------------------------------------------

def add(a, b):
    rec = _record(a, b)
    out = value(a) + value(b)
    if rec is None:
        return out
    sa, sb = _shape(a), _shape(b)
    return _node(rec, out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    rec = _record(a, b)
    out = value(a) - value(b)
    if rec is None:
        return out
    sa, sb = _shape(a), _shape(b)
    return _node(rec, out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    rec = _record(a, b)
    va, vb = value(a), value(b)
    out = va * vb
    if rec is None:
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return _node(rec, out, (a, b),
                 lambda g: (_unbroadcast(g * vb, sa), _unbroadcast(g * va, sb)), "mul")


def div(a, b):
    rec = _record(a, b)
    va, vb = value(a), value(b)
    out = va / vb
    if rec is None:
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return _node(rec, out, (a, b),
                 lambda g: (_unbroadcast(g / vb, sa), _unbroadcast(-g * out / vb, sb)), "div")


def neg(a):
    rec = _record(a)
    if rec is None:
        return -a
    return _node(rec, -a.value, (a,), lambda g: (-g,), "neg")


def square(a):
    rec = _record(a)
    va = value(a)
    if rec is None:
        return va * va
    return _node(rec, va * va, (a,), lambda g: (2.0 * g * va,), "square")


def sqrt(a):
    """Square root whose derivative at 0 is taken as 0 (used on squared norms)."""
    rec = _record(a)
    va = value(a)
    out = np.sqrt(np.maximum(va, 0.0))
    if rec is None:
        return out

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return _node(rec, out, (a,), vjp, "sqrt")


def exp(a):
    rec = _record(a)
    out = np.exp(value(a))
    if rec is None:
        return out
    return _node(rec, out, (a,), lambda g: (g * out,), "exp")


def log(a):
    rec = _record(a)
    va = value(a)
    out = np.log(va)
    if rec is None:
        return out
    return _node(rec, out, (a,), lambda g: (g / va,), "log")


def sin(a):
    rec = _record(a)
    va = value(a)
    out = np.sin(va)
    if rec is None:
        return out
    return _node(rec, out, (a,), lambda g: (g * np.cos(va),), "sin")


def cos(a):
    rec = _record(a)
    va = value(a)
    out = np.cos(va)
    if rec is None:
        return out
    return _node(rec, out, (a,), lambda g: (-g * np.sin(va),), "cos")


def atan2(y, x):
    rec = _record(y, x)
    vy, vx = value(y), value(x)
    out = np.arctan2(vy, vx)
    if rec is None:
        return out
    sy, sx = np.shape(vy), np.shape(vx)

    def vjp(g):
        r2 = vx * vx + vy * vy
        r2 = np.where(r2 > 0, r2, 1.0)
        return _unbroadcast(g * vx / r2, sy), _unbroadcast(-g * vy / r2, sx)

    return _node(rec, out, (y, x), vjp, "atan2")


_SINC_SMALL = 1e-4


def _sinc_value(x):
    small = np.abs(x) < _SINC_SMALL
    xs = np.where(small, 1.0, x)
    x2 = x * x
    return np.where(small, 1.0 - x2 / 6.0 + x2 * x2 / 120.0, np.sin(xs) / xs)


def _sinc_deriv(x):
    small = np.abs(x) < _SINC_SMALL
    xs = np.where(small, 1.0, x)
    return np.where(small, -x / 3.0 + x * x * x / 30.0,
                    (xs * np.cos(xs) - np.sin(xs)) / (xs * xs))


def sinc(a):
    """Unnormalized sinc, sin(x)/x, smooth through 0."""
    rec = _record(a)
    va = value(a)
    out = _sinc_value(va)
    if rec is None:
        return out
    return _node(rec, out, (a,), lambda g: (g * _sinc_deriv(va),), "sinc")


def where(mask, a, b):
    rec = _record(a, b)
    out = np.where(mask, value(a), value(b))
    if rec is None:
        return out
    sa, sb = _shape(a), _shape(b)
    return _node(rec, out, (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa),
                            _unbroadcast(np.where(mask, 0.0, g), sb)), "where")


def corrupt(a, factor):
    """Identity with a deliberately wrong adjoint; fault-injection hook for gradient checks."""
    rec = _record(a)
    if rec is None:
        return a
    return _node(rec, a.value, (a,), lambda g: (g * factor,), "corrupt")


# --- reductions and shape ops -----------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    rec = _record(a)
    va = value(a)
    out = np.sum(va, axis=axis, keepdims=keepdims)
    if rec is None:
        return out
    shape = va.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(rec, out, (a,), vjp, "sum")


def cumsum(a, axis):
    rec = _record(a)
    out = np.cumsum(value(a), axis=axis)
    if rec is None:
        return out

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _node(rec, out, (a,), vjp, "cumsum")


def reshape(a, shape):
    rec = _record(a)
    va = value(a)
    out = np.reshape(va, shape)
    if rec is None:
        return out
    old = va.shape
    return _node(rec, out, (a,), lambda g: (np.reshape(g, old),), "reshape")


def broadcast_to(a, shape):
    rec = _record(a)
    va = value(a)
    out = np.broadcast_to(va, shape)
    if rec is None:
        return out
    old = np.shape(va)
    return _node(rec, out, (a,), lambda g: (_unbroadcast(g, old),), "broadcast")


def _is_basic(key):
    key = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in key)


def getitem(a, key):
    rec = _record(a)
    va = value(a)
    out = va[key]
    if rec is None:
        return out
    shape = va.shape
    basic = _is_basic(key)

    def vjp(g):
        z = np.zeros(shape)
        if basic:
            z[key] = g
        else:
            np.add.at(z, key, g)
        return (z,)

    return _node(rec, out, (a,), vjp, "getitem")


def concat(items, axis):
    rec = _record(*items)
    vals = [value(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    if rec is None:
        return out
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _node(rec, out, tuple(items), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def swap_last(a):
    rec = _record(a)
    out = np.swapaxes(value(a), -1, -2)
    if rec is None:
        return out
    return _node(rec, out, (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def matmul(a, b):
    rec = _record(a, b)
    va, vb = value(a), value(b)
    out = va @ vb
    if rec is None:
        return out
    sa, sb = va.shape, vb.shape

    def vjp(g):
        ga = g @ np.swapaxes(vb, -1, -2) if vb.ndim > 1 else np.multiply.outer(g, vb)
        gb = np.swapaxes(va, -1, -2) @ g if va.ndim > 1 else np.multiply.outer(va, g)
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _node(rec, out, (a, b), vjp, "matmul")


def symmetrize(a):
    return mul(0.5, add(a, swap_last(a)))


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy of integer ``labels`` under ``logits`` (batch, classes)."""
    rec = _record(logits)
    z = value(logits)
    labels = np.asarray(labels, dtype=int)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z - zmax), axis=1)) + zmax[:, 0]
    rows = np.arange(z.shape[0])
    out = np.mean(lse - z[rows, labels])
    if rec is None:
        return out

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (g * p / z.shape[0],)

    return _node(rec, np.asarray(out), (logits,), vjp, "xent")


# --- SPD matrix functions ---------------------------------------------------

_FUNCS = {
    "sqrt": (np.sqrt, lambda w: 0.5 / np.sqrt(w)),
    "invsqrt": (lambda w: 1.0 / np.sqrt(w), lambda w: -0.5 / (w * np.sqrt(w))),
    "log": (np.log, lambda w: 1.0 / w),
    "exp": (np.exp, np.exp),
}


def eig_of(a):
    """Eigendecomposition of a symmetric stack, cached on recorded values."""
    if isinstance(a, Var):
        if a.eig is None:
            a.eig = sym_eig(a.value, check=False)
        return a.eig
    return sym_eig(a, check=False)


def _spectrum(w, kind):
    # exp is also applied to indefinite symmetric matrices (tangent vectors)
    return w if kind == "exp" else np.maximum(w, EIG_FLOOR)


def _loewner(lam, fw, dfw):
    diff = lam[..., :, None] - lam[..., None, :]
    safe = np.where(diff == 0.0, 1.0, diff)
    L = (fw[..., :, None] - fw[..., None, :]) / safe
    n = lam.shape[-1]
    idx = np.arange(n)
    L[..., idx, idx] = dfw
    return L


def _gap_flags(a_val, lam):
    n = lam.shape[-1]
    if n < 2:
        return np.zeros(lam.shape[:-1], dtype=bool)
    gaps = np.min(np.diff(lam, axis=-1), axis=-1)
    scale = np.sqrt(np.sum(a_val * a_val, axis=(-2, -1)))
    return gaps < GAP_GUARD * scale


def _matfun_adjoint(rec, a_val, w, V, lam, fw, dfw, g, fun):
    """Adjoint of A -> V f(lam) V^T for a stack of matrices."""
    gs = 0.5 * (g + np.swapaxes(g, -1, -2))
    Vt = np.swapaxes(V, -1, -2)
    L = _loewner(lam, fw, dfw)
    ga = V @ (L * (Vt @ gs @ V)) @ Vt
    flags = _gap_flags(a_val, lam)
    if flags.any():
        gnorm = np.sqrt(np.sum(gs * gs, axis=(-2, -1)))
        sel = flags & (gnorm > 0)
        if sel.any():
            A = a_val[sel]
            G = gs[sel]
            h = FD_STEP * np.sqrt(np.sum(A * A, axis=(-2, -1))) / gnorm[sel]
            h = h[:, None, None]
            ga[sel] = (fun(A + h * G, sel) - fun(A - h * G, sel)) / (2.0 * h)
            rec.diagnostics["fd_fallback_nodes"] += 1
            rec.diagnostics["fd_fallback_matrices"] += int(sel.sum())
        ga[flags & ~sel] = 0.0
    return 0.5 * (ga + np.swapaxes(ga, -1, -2))


def matfun(a, kind, eig=None):
    """Spectral function of symmetric matrices: ``kind`` in sqrt, invsqrt, log, exp.

    ``eig`` may pass a precomputed decomposition of ``a`` to share it between calls.
    """
    f, df = _FUNCS[kind]
    w, V = eig if eig is not None else eig_of(a)
    lam = _spectrum(w, kind)
    fw = f(lam)
    out = eig_apply(w, V, fw)
    rec = _record(a)
    if rec is None:
        return out
    a_val = a.value

    def fun(A, sel):
        ww, vv = sym_eig(A, check=False)
        return eig_apply(ww, vv, f(_spectrum(ww, kind)))

    def vjp(g):
        return (_matfun_adjoint(rec, a_val, w, V, lam, fw, df(lam), g, fun),)

    return _node(rec, out, (a,), vjp, "matfun_" + kind)


def matpow(a, t):
    """``A ** t`` for SPD ``A``; ``t`` broadcasts against the stack shape ``A.shape[:-2]``."""
    w, V = eig_of(a)
    lam = np.maximum(w, EIG_FLOOR)
    tv = np.asarray(value(t), dtype=float)
    te = np.broadcast_to(tv, lam.shape[:-1])[..., None]
    fw = lam ** te
    out = eig_apply(w, V, fw)
    rec = _record(a, t)
    if rec is None:
        return out
    a_val = value(a)
    t_shape = tv.shape

    def fun(A, sel):
        ww, vv = sym_eig(A, check=False)
        return eig_apply(ww, vv, np.maximum(ww, EIG_FLOOR) ** te[sel])

    def vjp(g):
        ga = None
        if isinstance(a, Var):
            ga = _matfun_adjoint(rec, a_val, w, V, lam, fw, te * lam ** (te - 1.0), g, fun)
        gt = None
        if isinstance(t, Var):
            Vt = np.swapaxes(V, -1, -2)
            diag = np.diagonal(Vt @ g @ V, axis1=-2, axis2=-1)
            gt = _unbroadcast(np.sum(diag * fw * np.log(lam), axis=-1), t_shape)
        return ga, gt

    return _node(rec, out, (a, t), vjp, "matpow")
