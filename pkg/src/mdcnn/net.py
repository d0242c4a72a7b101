"""Dilated convolutional networks over manifold-valued sequences.

Batched tensors have shape ``(batch, channels, time, *point_shape)``. Every layer
is a set of streaming weighted Frechet means (see :mod:`mdcnn.wfm`), so all ops
go through :mod:`mdcnn.autodiff` and work with plain or recorded values.

Architecture text format (``key = value`` lines, ``#`` comments)::

    manifold    = spd            # spd | sphere
    dim         = 3              # SPD matrix size, or sphere ambient dimension
    in_channels = 1
    blocks      = 1,3,3; 3,3,3   # per block: c_in, conv channels, residual channels
    kernel      = 3
    nC          = 4              # templates in the invariant head
    head        = invariant      # invariant | tangent
    num_classes = 2

Block ``b`` uses dilation ``2**b`` in both of its convolutions. The first conv maps
``c_in -> conv`` channels, the second ``conv -> conv``, and the residual merge maps
the ``c_in + conv`` concatenated channels to ``res`` channels.
"""
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DomainError
from .manifolds import manifold_from
from .params import ModelParams, ParamSpec
from .wfm import step_fractions


@dataclass
class NetConfig:
    manifold: str = "spd"
    dim: int = 3
    blocks: list = field(default_factory=lambda: [(1, 3, 3)])
    kernel: int = 3
    nC: int = 4
    head: str = "invariant"
    num_classes: int = 2
    in_channels: int = 1

    def __post_init__(self):
        self.blocks = [tuple(int(c) for c in b) for b in self.blocks]
        self.validate()

    def validate(self):
        manifold_from(self.manifold, self.dim)
        if self.kernel < 1:
            raise DomainError("kernel size must be >= 1")
        if self.head not in ("invariant", "tangent"):
            raise DomainError(f"unknown head {self.head!r}")
        if self.nC < 1 or self.num_classes < 1 or self.in_channels < 1:
            raise DomainError("nC, num_classes and in_channels must be positive")
        c = self.in_channels
        for i, b in enumerate(self.blocks):
            if len(b) != 3 or min(b) < 1:
                raise DomainError(f"block {i}: expected three positive channel counts, got {b}")
            if b[0] != c:
                raise DomainError(f"block {i} expects {b[0]} input channels but receives {c}")
            c = b[2]

    @property
    def space(self):
        return manifold_from(self.manifold, self.dim)

    @property
    def out_channels(self):
        return self.blocks[-1][2] if self.blocks else self.in_channels

    def dilations(self):
        return [2 ** i for i in range(len(self.blocks))]

    def receptive_field(self):
        """Number of past steps that can influence an output, beyond the current one."""
        return sum(2 * (self.kernel - 1) * d for d in self.dilations())

    def head_features(self):
        c = self.out_channels
        if self.head == "invariant":
            return c * self.nC
        return c * self.space.tangent_size()

    def param_specs(self):
        specs = []
        k = self.kernel
        for i, (cin, cconv, cres) in enumerate(self.blocks):
            specs.append(ParamSpec(f"block{i}.conv1", (cconv, k * cin), "convex"))
            specs.append(ParamSpec(f"block{i}.conv2", (cconv, k * cconv), "convex"))
            specs.append(ParamSpec(f"block{i}.res", (cres, cin + cconv), "convex"))
        if self.head == "invariant":
            specs.append(ParamSpec("head.templates", (self.nC, self.out_channels), "convex"))
        specs.append(ParamSpec("head.fc_weight", (self.num_classes, self.head_features()), "fc"))
        specs.append(ParamSpec("head.fc_bias", (self.num_classes,), "fc"))
        return specs

    def init_params(self, rng):
        """Raw convex weights uniform in [0.5, 1.5]; FC weights uniform in +-1/sqrt(fan_in); zero bias."""
        params = ModelParams(self.param_specs())
        arrays = params.arrays()
        for s in params.specs:
            if s.kind == "convex":
                arrays[s.name][...] = rng.uniform(0.5, 1.5, size=s.shape)
            elif s.name == "head.fc_weight":
                a = 1.0 / np.sqrt(s.shape[1])
                arrays[s.name][...] = rng.uniform(-a, a, size=s.shape)
        return params

    def to_text(self):
        blocks = "; ".join(",".join(str(c) for c in b) for b in self.blocks)
        return "\n".join([
            f"manifold = {self.manifold}",
            f"dim = {self.dim}",
            f"in_channels = {self.in_channels}",
            f"blocks = {blocks}",
            f"kernel = {self.kernel}",
            f"nC = {self.nC}",
            f"head = {self.head}",
            f"num_classes = {self.num_classes}",
        ]) + "\n"

    @classmethod
    def from_mapping(cls, kv):
        known = {"manifold", "dim", "in_channels", "blocks", "kernel", "nC", "head", "num_classes"}
        unknown = set(kv) - known
        if unknown:
            raise DomainError(f"unknown architecture keys: {sorted(unknown)}")
        args = {}
        for key, val in kv.items():
            if key in ("manifold", "head"):
                args[key] = str(val).strip()
            elif key == "blocks":
                args[key] = parse_blocks(val)
            else:
                args[key] = int(val)
        return cls(**args)

    @classmethod
    def from_text(cls, text):
        return cls.from_mapping(parse_kv(text))


def parse_kv(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DomainError(f"line {lineno}: expected 'key = value'")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def parse_blocks(text):
    if isinstance(text, (list, tuple)):
        return [tuple(b) for b in text]
    text = text.strip()
    if not text or text == "none":
        return []
    return [tuple(int(c) for c in part.split(",")) for part in text.split(";") if part.strip()]


@dataclass
class ManifoldSequence:
    """A ``channels x length`` grid of points on one manifold; ``values`` has shape (c, N, *point_shape)."""

    manifold: object
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        ps = self.manifold.point_shape
        if self.values.ndim != 2 + len(ps) or self.values.shape[2:] != ps:
            raise DomainError(f"sequence values of shape {self.values.shape} do not match {self.manifold!r}")

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def length(self):
        return self.values.shape[1]

    def validate(self):
        self.manifold.check_points(self.values)
        return self


# --- layers ----------------------------------------------------------------

def _tfrac(t, n, shape):
    return ad.reshape(ad.getitem(t, (slice(None), n)), shape)


def dilated_conv_forward(manifold, X, raw, kernel, dilation):
    """Causal dilated convolution: one streaming wFM per output channel over ``kernel * c_in`` taps.

    Taps are ordered time-offset-major, channel-minor, starting at the current
    step. At the left boundary missing taps are dropped, which for this ordering
    just ends the recursion early.
    """
    B, c_in, T = ad.value(X).shape[:3]
    rest = ad.value(X).shape[3:]
    c_out, L = ad.value(raw).shape
    if L != kernel * c_in:
        raise DomainError(f"conv layer expects {L // kernel} input channels, got {c_in}")
    t = step_fractions(raw)
    M = ad.broadcast_to(X[:, 0:1], (B, c_out, T) + rest)
    for n in range(1, L):
        i, j = divmod(n, c_in)
        shift = i * dilation
        if shift >= T:
            break
        tn = _tfrac(t, n, (1, c_out, 1))
        P = X[:, j:j + 1, :T - shift]
        if shift == 0:
            M = manifold.geodesic(M, P, tn)
        else:
            tail = manifold.geodesic(M[:, :, shift:], P, tn)
            M = ad.concat([M[:, :, :shift], tail], axis=2)
    return M


def channel_wfm(manifold, Z, raw):
    """Per output row of ``raw``, the streaming wFM across the channels of ``Z`` at each time."""
    B, C, T = ad.value(Z).shape[:3]
    rest = ad.value(Z).shape[3:]
    c_out, L = ad.value(raw).shape
    if L != C:
        raise DomainError(f"merge weights cover {L} channels, input has {C}")
    t = step_fractions(raw)
    M = ad.broadcast_to(Z[:, 0:1], (B, c_out, T) + rest)
    for n in range(1, L):
        M = manifold.geodesic(M, Z[:, n:n + 1], _tfrac(t, n, (1, c_out, 1)))
    return M


def residual_forward(manifold, X, raw_conv1, raw_conv2, raw_res, kernel, dilation):
    """Two dilated convolutions, then a wFM merge of ``[X, F(X)]`` down to the residual channels."""
    F = dilated_conv_forward(manifold, X, raw_conv1, kernel, dilation)
    F = dilated_conv_forward(manifold, F, raw_conv2, kernel, dilation)
    return channel_wfm(manifold, ad.concat([X, F], axis=1), raw_res)


def invariant_head_forward(manifold, X_last, templates, fc_weight, fc_bias):
    """Distances from each channel to ``nC`` learned wFM templates, then a linear map.

    ``X_last`` has shape (batch, c, *point_shape); features are ordered channel-major.
    """
    B, c = ad.value(X_last).shape[:2]
    rest = ad.value(X_last).shape[2:]
    nC = ad.value(templates).shape[0]
    mu = channel_wfm(manifold, ad.reshape(X_last, (B, c, 1) + rest), templates)[:, :, 0]
    Xi = ad.reshape(X_last, (B, c, 1) + rest)
    Mj = ad.reshape(mu, (B, 1, nC) + rest)
    feats = ad.reshape(manifold.dist(Xi, Mj), (B, c * nC))
    return _fc(feats, fc_weight, fc_bias), feats


def tangent_head_forward(manifold, X_last, fc_weight, fc_bias):
    """Linear map of the tangent coordinates at the fixed base point. Not isometry-invariant."""
    B, c = ad.value(X_last).shape[:2]
    feats = ad.reshape(manifold.tangent_coords(X_last), (B, -1))
    return _fc(feats, fc_weight, fc_bias), feats


def _fc(feats, W, b):
    return ad.add(ad.matmul(feats, ad.swap_last(W)), b)


# --- whole network ----------------------------------------------------------

def _batched(config, X):
    if isinstance(X, ManifoldSequence):
        X = X.values[None]
    vals = ad.value(X)
    ps = config.space.point_shape
    if vals.ndim != 3 + len(ps) or vals.shape[3:] != ps:
        raise DomainError(f"input of shape {vals.shape} does not match {config.space!r}")
    if vals.shape[1] != config.in_channels:
        raise DomainError(f"network expects {config.in_channels} input channels, got {vals.shape[1]}")
    return X


def _arrays(config, params):
    if isinstance(params, ModelParams):
        return params.arrays()
    return params


def network_forward_sequence(config, params, X):
    """Manifold-valued output of the last residual block (the input itself when there are none)."""
    X = _batched(config, X)
    p = _arrays(config, params)
    space = config.space
    for i, d in enumerate(config.dilations()):
        X = residual_forward(space, X, p[f"block{i}.conv1"], p[f"block{i}.conv2"],
                             p[f"block{i}.res"], config.kernel, d)
    return X


def last_values(Y, lengths=None):
    if lengths is None:
        return Y[:, :, -1]
    lengths = np.asarray(lengths, dtype=int)
    B, c = ad.value(Y).shape[:2]
    rows = np.arange(B)[:, None]
    chans = np.arange(c)[None, :]
    return ad.getitem(Y, (rows, chans, (lengths - 1)[:, None]))


def head_forward(config, params, X_last):
    p = _arrays(config, params)
    if config.head == "invariant":
        return invariant_head_forward(config.space, X_last, p["head.templates"],
                                      p["head.fc_weight"], p["head.fc_bias"])[0]
    return tangent_head_forward(config.space, X_last, p["head.fc_weight"], p["head.fc_bias"])[0]


def network_forward(config, params, X, lengths=None):
    """Class logits from the last valid time step of each sequence."""
    Y = network_forward_sequence(config, params, X)
    return head_forward(config, params, last_values(Y, lengths))
