"""Tensor, tape, RNG, and kernel backends."""

from . import ops
from .gradcheck import GradCheckReport, check_gradients
from .kernels import active_backend
from .precision import dtype, precision, set_precision, use_precision
from .rng import RngStream
from .tape import GradMap, Tape, active_tape, collect_parameters, stats
from .tensor import Tensor

__all__ = [
    "ops",
    "Tensor",
    "Tape",
    "GradMap",
    "GradCheckReport",
    "RngStream",
    "active_tape",
    "active_backend",
    "check_gradients",
    "collect_parameters",
    "stats",
    "set_precision",
    "use_precision",
    "precision",
    "dtype",
]
