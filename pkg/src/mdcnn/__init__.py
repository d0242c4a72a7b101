"""Dilated convolutional networks for sequences of SPD matrices and sphere points."""
from .errors import DegenerateGeodesicError, DomainError, FormatError, NumericalError
from .manifolds import SPD, Sphere
from .net import ManifoldSequence, NetConfig
from .params import ModelParams

__version__ = "0.1.0"
__all__ = ["DegenerateGeodesicError", "DomainError", "FormatError", "ManifoldSequence", "ModelParams",
           "NetConfig", "NumericalError", "SPD", "Sphere"]
