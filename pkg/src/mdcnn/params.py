"""Flat parameter vectors with a named index map, and the MPAR file format.

MPAR layout (little-endian)::

    magic      4 bytes  b"MPAR"
    version    u16      1
    count      u64      number of float64 values
    values     count * f64
    map_len    u64      byte length of the index map
    index_map  map_len bytes of UTF-8 text

The index map has one line per parameter group, ``name kind shape offset`` with
the shape written as ``2x6``. ``kind`` is ``convex`` for square-root weight
groups (one convex weight vector per row) and ``fc`` for plain real weights.
"""
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError

MAGIC = b"MPAR"
VERSION = 1
_HEADER = struct.Struct("<4sHQ")


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple
    kind: str

    @property
    def size(self):
        return int(np.prod(self.shape)) if self.shape else 1


class ModelParams:
    """Ordered flat float64 vector of all trainable scalars plus its index map."""

    def __init__(self, specs, flat=None):
        self.specs = list(specs)
        self.offsets = np.cumsum([0] + [s.size for s in self.specs])
        size = int(self.offsets[-1])
        if flat is None:
            flat = np.zeros(size)
        flat = np.array(flat, dtype=float)
        if flat.shape != (size,):
            raise DomainError(f"expected {size} parameters, got {flat.shape}")
        self.flat = flat

    def __len__(self):
        return self.flat.size

    def copy(self):
        return ModelParams(self.specs, self.flat.copy())

    def spec(self, name):
        for s in self.specs:
            if s.name == name:
                return s
        raise KeyError(name)

    def slice(self, name):
        i = [s.name for s in self.specs].index(name)
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def arrays(self):
        """Name -> reshaped view into ``flat``."""
        return {s.name: self.flat[int(o):int(o) + s.size].reshape(s.shape)
                for s, o in zip(self.specs, self.offsets)}

    def convex_mask(self):
        mask = np.zeros(self.flat.size, dtype=bool)
        for s, o in zip(self.specs, self.offsets):
            if s.kind == "convex":
                mask[int(o):int(o) + s.size] = True
        return mask

    def comparison_vector(self):
        """Normalized convex weights (not raw square roots) followed by real weights, in order."""
        parts = []
        for s, arr in zip(self.specs, self.arrays().values()):
            if s.kind == "convex":
                sq = arr * arr
                parts.append((sq / sq.sum(axis=-1, keepdims=True)).ravel())
            else:
                parts.append(arr.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def index_map(self):
        lines = []
        for s, o in zip(self.specs, self.offsets):
            shape = "x".join(str(d) for d in s.shape) or "1"
            lines.append(f"{s.name} {s.kind} {shape} {int(o)}")
        return "\n".join(lines)

    def group_of(self, index):
        i = int(np.searchsorted(self.offsets, index, side="right")) - 1
        return self.specs[i].name

    def to_bytes(self):
        text = self.index_map().encode("utf-8")
        return b"".join([
            _HEADER.pack(MAGIC, VERSION, self.flat.size),
            self.flat.astype("<f8").tobytes(),
            struct.pack("<Q", len(text)),
            text,
        ])

    @classmethod
    def from_bytes(cls, data):
        if len(data) < _HEADER.size:
            raise FormatError(len(data), "truncated MPAR header")
        magic, version, count = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatError(0, f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(4, f"unsupported MPAR version {version}")
        pos = _HEADER.size
        end = pos + 8 * count
        if len(data) < end + 8:
            raise FormatError(len(data), "truncated parameter values")
        flat = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(float)
        (map_len,) = struct.unpack_from("<Q", data, end)
        pos = end + 8
        if len(data) < pos + map_len:
            raise FormatError(len(data), "truncated index map")
        try:
            text = data[pos:pos + map_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(pos + exc.start, "index map is not UTF-8") from None
        specs = []
        for line in filter(None, text.split("\n")):
            name, kind, shape, _ = line.split(" ")
            dims = tuple(int(d) for d in shape.split("x"))
            specs.append(ParamSpec(name, dims, kind))
        return cls(specs, flat)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
