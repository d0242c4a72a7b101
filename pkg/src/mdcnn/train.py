"""Gradients, SGD, and the two training objectives (classification and next-step prediction)."""
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DomainError, NumericalError
from .net import network_forward, network_forward_sequence
from .wfm import floor_raw

log = logging.getLogger(__name__)

GRAD_RTOL = 1e-5
FD_H = 1e-5
CORRUPT_FACTOR = 1.5


@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise DomainError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise DomainError("batch_size must be >= 1 and epochs >= 0")


def pad_sequences(sequences):
    """Right-pad variable-length sequences by repeating their last value.

    Causality makes the padding invisible to every valid output step.
    """
    lengths = np.array([s.length for s in sequences], dtype=int)
    T = int(lengths.max())
    out = []
    for s in sequences:
        v = s.values
        if s.length < T:
            v = np.concatenate([v, np.repeat(v[:, -1:], T - s.length, axis=1)], axis=1)
        out.append(v)
    return np.stack(out), lengths


# --- losses ------------------------------------------------------------------

def classification_loss(config, p, X, y, lengths=None):
    logits = network_forward(config, p, X, lengths)
    return ad.softmax_cross_entropy(logits, y), logits


def prediction_loss(config, p, X, lengths=None):
    """Mean over sequences of the mean over s of d^2(Y_0(s), X_0(s+1)).

    ``lengths=None`` treats every sequence as full length.
    """
    if lengths is None:
        lengths = np.full(ad.value(X).shape[0], ad.value(X).shape[2])
    lengths = np.asarray(lengths, dtype=int)
    if np.any(lengths < 2):
        raise DomainError("next-step prediction needs sequences of length >= 2")
    Y = network_forward_sequence(config, p, X)
    pred = ad.getitem(Y, (slice(None), 0, slice(0, -1)))
    target = ad.value(X)[:, 0, 1:]
    d2 = config.space.dist2(pred, target)
    T1 = ad.value(d2).shape[1]
    steps = (lengths - 1)[:, None]
    weights = (np.arange(T1)[None, :] < steps) / steps / len(lengths)
    return ad.sum(ad.mul(d2, weights))


# --- gradients ---------------------------------------------------------------

def backward(record, loss, leaves):
    """Run the reverse pass and return the gradient aligned with the given parameter leaves."""
    record.backward(loss)
    return np.concatenate([
        (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)).ravel() for leaf in leaves
    ])


def loss_and_grad(config, params, X, y=None, lengths=None, task="classify", corrupt=None):
    """Loss value, gradient vector (ModelParams order) and record diagnostics.

    ``corrupt`` names a parameter group whose adjoint is deliberately scaled by ``CORRUPT_FACTOR``
    (fault injection for gradient-check tests).
    """
    rec = ad.DiffRecord()
    leaves = [rec.param(arr, name) for name, arr in params.arrays().items()]
    p = {leaf.name: leaf for leaf in leaves}
    if corrupt is not None:
        if corrupt not in p:
            raise DomainError(f"unknown parameter group {corrupt!r}")
        p[corrupt] = ad.corrupt(p[corrupt], CORRUPT_FACTOR)
    if task == "classify":
        loss, logits = classification_loss(config, p, X, y, lengths)
        extra = ad.value(logits)
    elif task == "predict":
        loss, extra = prediction_loss(config, p, X, lengths), None
    else:
        raise DomainError(f"unknown task {task!r}")
    grad = backward(rec, loss, leaves)
    return float(ad.value(loss)), grad, extra, rec.diagnostics


def loss_value(config, params, X, y=None, lengths=None, task="classify"):
    p = params.arrays()
    if task == "classify":
        return float(classification_loss(config, p, X, y, lengths)[0])
    return float(prediction_loss(config, p, X, lengths))


def check_gradients(config, seed=0, batch=2, length=8, task="classify", h=FD_H, corrupt=None):
    """Compare reverse-mode gradients with central differences on a random network and batch.

    Returns a dict with per-group ``max_abs`` / ``max_rel`` deviations, the worst
    parameter, and ``passed`` (max relative error ``|ad - fd| / max(1, |fd|)`` at most 1e-5).
    """
    rng = np.random.default_rng(seed)
    params = config.init_params(rng)
    params.arrays()["head.fc_bias"][...] = rng.uniform(-0.5, 0.5, config.num_classes)
    X = random_inputs(config, rng, batch, length)
    y = rng.integers(0, config.num_classes, size=batch)
    lengths = np.full(batch, length)
    _, g_ad, _, diag = loss_and_grad(config, params, X, y, lengths, task, corrupt=corrupt)

    g_fd = np.empty_like(g_ad)
    work = params.copy()
    for i in range(len(params)):
        x0 = work.flat[i]
        work.flat[i] = x0 + h
        fp = loss_value(config, work, X, y, lengths, task)
        work.flat[i] = x0 - h
        fm = loss_value(config, work, X, y, lengths, task)
        work.flat[i] = x0
        g_fd[i] = (fp - fm) / (2 * h)

    abs_err = np.abs(g_ad - g_fd)
    rel_err = abs_err / np.maximum(1.0, np.abs(g_fd))
    groups = {}
    for s in params.specs:
        sl = params.slice(s.name)
        groups[s.name] = {"max_abs": float(abs_err[sl].max()), "max_rel": float(rel_err[sl].max())}
    worst = int(np.argmax(rel_err))
    return {
        "groups": groups,
        "max_rel": float(rel_err.max()),
        "max_abs": float(abs_err.max()),
        "worst_index": worst,
        "worst_group": params.group_of(worst),
        "passed": bool(rel_err.max() <= GRAD_RTOL),
        "n_params": len(params),
        "diagnostics": diag,
    }


def random_inputs(config, rng, batch, length, spread=0.5):
    """Random sequences clustered around the base point (a cap well inside the injectivity radius on spheres)."""
    space = config.space
    shape = (batch, config.in_channels, length)
    if space.kind == "spd":
        return space.random_point(rng, shape, spread=spread)
    base = space.base_point()
    v = rng.normal(scale=spread / np.sqrt(space.m), size=shape + (space.m,))
    v[..., 0] = 0.0
    return space.exp(base, v)


# --- optimisation -------------------------------------------------------------

class Sgd:
    """SGD with optional momentum; raw convex weights are floored after every step."""

    def __init__(self, params, cfg):
        self.cfg = cfg
        self.velocity = np.zeros_like(params.flat)
        self.convex = params.convex_mask()

    def step(self, params, grad):
        self.velocity = self.cfg.momentum * self.velocity + grad
        params.flat -= self.cfg.learning_rate * self.velocity
        params.flat[self.convex] = floor_raw(params.flat[self.convex])


def _check_finite(loss, grad, where):
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite loss or gradient at {where} (loss={loss})")


def predict_logits(config, params, X, batch_size=64):
    out = [network_forward(config, params, X[i:i + batch_size]) for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, config.num_classes))


def accuracy(config, params, X, y, batch_size=64):
    return float(np.mean(np.argmax(predict_logits(config, params, X, batch_size), axis=1) == y))


def train_classifier(config, dataset, sgd, params=None, callback=None):
    """Minibatch SGD on softmax cross-entropy.

    Returns the final parameters and a per-epoch history of mean training loss and
    accuracy (measured on each minibatch before its update).
    """
    X, y = dataset.arrays() if hasattr(dataset, "arrays") else dataset
    if np.any(y < 0) or np.any(y >= config.num_classes):
        raise DomainError("classification needs labels in [0, num_classes)")
    rng = np.random.default_rng(sgd.seed)
    params = config.init_params(rng) if params is None else params.copy()
    opt = Sgd(params, sgd)
    history = []
    for epoch in range(sgd.epochs):
        order = rng.permutation(len(X))
        total, correct = 0.0, 0
        for start in range(0, len(X), sgd.batch_size):
            idx = order[start:start + sgd.batch_size]
            loss, grad, logits, _ = loss_and_grad(config, params, X[idx], y[idx])
            _check_finite(loss, grad, f"epoch {epoch}, batch starting {start}")
            total += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == y[idx]))
            opt.step(params, grad)
        rec = {"epoch": epoch, "loss": total / len(X), "accuracy": correct / len(X)}
        history.append(rec)
        log.info("epoch %d loss %.4f acc %.3f", epoch, rec["loss"], rec["accuracy"])
        if callback is not None:
            callback(rec, params)
    return params, history


def train_group_model(config, sequences, sgd, params=None):
    """Fit one group by causal next-step geodesic prediction with the headless network.

    Sequences of different lengths are right-padded within each minibatch.
    """
    if not sequences:
        raise DomainError("no sequences to fit")
    if any(s.length < 2 for s in sequences):
        raise DomainError("next-step prediction needs sequences of length >= 2")
    rng = np.random.default_rng(sgd.seed)
    params = config.init_params(rng) if params is None else params.copy()
    opt = Sgd(params, sgd)
    n = len(sequences)
    full = sgd.batch_size >= n
    if full:
        X, lengths = pad_sequences(sequences)
    for epoch in range(sgd.epochs):
        if full:
            batches = [(X, lengths)]
        else:
            order = rng.permutation(n)
            batches = [pad_sequences([sequences[i] for i in order[s:s + sgd.batch_size]])
                       for s in range(0, n, sgd.batch_size)]
        for Xb, lb in batches:
            loss, grad, _, _ = loss_and_grad(config, params, Xb, lengths=lb, task="predict")
            _check_finite(loss, grad, f"epoch {epoch}")
            opt.step(params, grad)
    return params
