"""Synthetic manifold-valued sequences, ODF conversion, windowed covariances and MSQ1 files.

MSQ1 layout (little-endian)::

    magic    4 bytes  b"MSQ1"
    version  u16      1
    kind     u8       0 = SPD, 1 = sphere
    dim      u32      SPD matrix size or sphere ambient dimension
    channels u32
    count    u64      number of sequences
    then per sequence:
      length  u32
      label   i32     -1 when unlabeled
      payload length * channels * point_size float64, shape (channels, length, *point)
"""
import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, FormatError
from .linalg import eig_apply, sym_eig, symmetrize
from .manifolds import SPD, Sphere, manifold_from
from .net import ManifoldSequence

MAGIC = b"MSQ1"
VERSION = 1
_HEADER = struct.Struct("<4sHBIIQ")
_SEQ = struct.Struct("<Ii")
NOISE_FLOOR = 1e-6
MIN_BUNDLE_LEN = 11
MAX_BUNDLE_LEN = 73


@dataclass
class SequenceDataset:
    manifold: object
    channels: int = 1
    sequences: list = field(default_factory=list)
    labels: list = field(default_factory=list)

    def __len__(self):
        return len(self.sequences)

    def append(self, seq, label=None):
        if seq.manifold != self.manifold or seq.channels != self.channels:
            raise DomainError(f"sequence on {seq.manifold!r} with {seq.channels} channels does not "
                              f"fit dataset on {self.manifold!r} with {self.channels} channels")
        self.sequences.append(seq)
        self.labels.append(label)

    def arrays(self):
        """Stack equal-length sequences into (n, c, N, *point) values and integer labels."""
        lengths = {s.length for s in self.sequences}
        if len(lengths) != 1:
            raise DomainError("sequences have different lengths; use padded batches instead")
        X = np.stack([s.values for s in self.sequences])
        y = np.array([-1 if lab is None else lab for lab in self.labels], dtype=int)
        return X, y


def odf_to_sphere(x):
    """Square-root map of a discrete orientation density onto the positive orthant of the sphere."""
    x = np.asarray(x, dtype=float)
    if x.ndim < 1:
        raise DomainError("ODF must be a vector")
    if np.any(x < 0):
        raise DomainError("ODF has negative entries")
    if np.any(np.abs(x.sum(axis=-1) - 1.0) > 1e-9):
        raise DomainError("ODF entries do not sum to 1")
    y = np.sqrt(x)
    return y / np.linalg.norm(y, axis=-1, keepdims=True)


def plane_rotation(dim, angle):
    R = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    R[0, 0], R[0, 1], R[1, 0], R[1, 1] = c, -s, s, c
    return R


def _floor_spd(A, floor=NOISE_FLOOR):
    w, V = sym_eig(A, check=False)
    return eig_apply(w, V, np.maximum(w, floor))


def gen_rotating_spd(n_per_class, length, dim, angles_deg, noise_sigma=0.05, seed=0):
    """Labeled SPD sequences whose base matrix turns by a class-specific angle each step.

    Every sample draws a random base ``X0 = Q diag(lam) Q^T`` (log-eigenvalues spread
    evenly over ``+-a`` with ``a`` in [0.5, 1]) and emits ``R(s*theta) X0 R(s*theta)^T``
    where ``R`` rotates the first two coordinates. Symmetric Gaussian noise of scale
    ``noise_sigma`` is added and the spectrum floored at 1e-6. Label ``i`` is the
    index of the angle in ``angles_deg``.
    """
    if dim < 2 or length < 1 or n_per_class < 0:
        raise DomainError("need dim >= 2, length >= 1, n_per_class >= 0")
    angles = np.deg2rad(np.asarray(angles_deg, dtype=float))
    if len(set(angles.tolist())) != len(angles):
        raise DomainError("class angles must be distinct")
    rng = np.random.default_rng(seed)
    space = SPD(dim)
    ds = SequenceDataset(space, 1)
    spread = np.linspace(-1.0, 1.0, dim)
    for label, theta in enumerate(angles):
        rots = np.stack([plane_rotation(dim, s * theta) for s in range(length)])
        for _ in range(n_per_class):
            Q, R = np.linalg.qr(rng.normal(size=(dim, dim)))
            Q = Q * np.sign(np.diag(R))
            lam = np.exp(rng.uniform(0.5, 1.0) * spread + rng.uniform(-0.5, 0.5))
            X0 = (Q * lam) @ Q.T
            X = rots @ X0 @ np.swapaxes(rots, -1, -2)
            if noise_sigma > 0:
                E = rng.normal(scale=noise_sigma, size=X.shape)
                X = _floor_spd(symmetrize(X + symmetrize(E)))
            else:
                X = symmetrize(X)
            ds.append(ManifoldSequence(space, X[None]).validate(), label)
    return ds


def rotating_odf(m, length, rate, start, concentration, noise_sigma, rng):
    """Axial von Mises density on ``m`` orientation bins whose peak advances ``rate`` radians per step."""
    phi = np.pi * np.arange(m) / m
    centers = start + rate * np.arange(length)
    logits = concentration * np.cos(2.0 * (phi[None, :] - centers[:, None]))
    if noise_sigma > 0:
        logits = logits + rng.normal(scale=noise_sigma, size=logits.shape)
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def gen_group_sequences(n, length, dim, rate, effect, seed=0, noise_sigma=0.3):
    """Two groups of single-channel ODF sequences on the sphere in ``R^dim``.

    Group A rotates its orientation peak by ``rate`` radians per step, group B by
    ``rate * (1 + effect)``. Each subject gets a random start angle, a concentration
    in [2, 4] and a length uniform in [11, ``length``], where ``length`` itself must lie in [11, 73].
    With ``effect = 0`` both groups come from one distribution.
    """
    if dim < 2 or n < 1:
        raise DomainError("need dim >= 2 and n >= 1")
    if not MIN_BUNDLE_LEN <= length <= MAX_BUNDLE_LEN:
        raise DomainError(f"length must lie in [{MIN_BUNDLE_LEN}, {MAX_BUNDLE_LEN}]")
    rng = np.random.default_rng(seed)
    space = Sphere(dim)
    groups = []
    for group_rate in (rate, rate * (1.0 + effect)):
        seqs = []
        for _ in range(n):
            N = int(rng.integers(MIN_BUNDLE_LEN, length + 1))
            odf = rotating_odf(dim, N, group_rate, rng.uniform(0, np.pi), rng.uniform(2.0, 4.0),
                               noise_sigma, rng)
            seqs.append(ManifoldSequence(space, odf_to_sphere(odf)[None]).validate())
        groups.append(seqs)
    return groups[0], groups[1]


def covariance_from_features(features, window, epsilon=1e-3):
    """Sliding-window sample covariance plus ``epsilon * I``, one SPD matrix per window end."""
    F = np.asarray(features, dtype=float)
    if F.ndim != 2:
        raise DomainError("features must be a T x f matrix")
    T, f = F.shape
    if window < 2 or window > T:
        raise DomainError(f"window must satisfy 2 <= window <= T (window={window}, T={T})")
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    wins = np.lib.stride_tricks.sliding_window_view(F, window, axis=0)  # (T-w+1, f, w)
    centered = wins - wins.mean(axis=2, keepdims=True)
    C = centered @ np.swapaxes(centered, -1, -2) / (window - 1)
    C = symmetrize(C) + epsilon * np.eye(f)
    space = SPD(f)
    return ManifoldSequence(space, C[None]).validate()


# --- MSQ1 -------------------------------------------------------------------

def dataset_to_bytes(ds):
    space = ds.manifold
    parts = [_HEADER.pack(MAGIC, VERSION, space.code, space.dim, ds.channels, len(ds))]
    for seq, label in zip(ds.sequences, ds.labels):
        parts.append(_SEQ.pack(seq.length, -1 if label is None else int(label)))
        parts.append(np.ascontiguousarray(seq.values, dtype="<f8").tobytes())
    return b"".join(parts)


def dataset_from_bytes(data):
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(0, f"bad magic {bytes(data[:4])!r}")
    if len(data) < _HEADER.size:
        raise FormatError(len(data), "truncated header")
    _, version, kind, dim, channels, count = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise FormatError(4, f"unsupported version {version}")
    if kind not in (0, 1):
        raise FormatError(6, f"unknown manifold kind {kind}")
    try:
        space = manifold_from(kind, dim)
    except DomainError as exc:
        raise FormatError(7, str(exc)) from None
    point = int(np.prod(space.point_shape))
    ds = SequenceDataset(space, channels)
    pos = _HEADER.size
    for _ in range(count):
        if len(data) < pos + _SEQ.size:
            raise FormatError(len(data), "truncated sequence header")
        length, label = _SEQ.unpack_from(data, pos)
        pos += _SEQ.size
        nvals = channels * length * point
        if len(data) < pos + 8 * nvals:
            raise FormatError(len(data), "truncated sequence payload")
        vals = np.frombuffer(data, dtype="<f8", count=nvals, offset=pos).astype(float)
        try:
            seq = ManifoldSequence(space, vals.reshape((channels, length) + space.point_shape)).validate()
        except DomainError as exc:
            raise FormatError(pos, f"invalid manifold value: {exc}") from None
        pos += 8 * nvals
        ds.append(seq, None if label < 0 else label)
    if pos != len(data):
        raise FormatError(pos, "trailing bytes after last sequence")
    return ds


def save_dataset(ds, path):
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def load_dataset(path):
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


def export_csv(ds, path):
    """One row per (sequence, channel, time) with the flattened point values."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        size = int(np.prod(ds.manifold.point_shape))
        w.writerow(["sequence", "label", "channel", "time"] + [f"v{i}" for i in range(size)])
        for i, (seq, label) in enumerate(zip(ds.sequences, ds.labels)):
            flat = seq.values.reshape(seq.channels, seq.length, -1)
            for c in range(seq.channels):
                for s in range(seq.length):
                    w.writerow([i, "" if label is None else label, c, s] + [repr(float(v)) for v in flat[c, s]])
