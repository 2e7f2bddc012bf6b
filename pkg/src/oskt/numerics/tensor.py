"""A tensor is a contiguous numpy array plus a gradient flag.

There is deliberately no in-place autograd state on the tensor itself:
operations record onto the active :class:`~oskt.numerics.tape.Tape`, and
gradients live in the map returned by ``Tape.backward``.  That keeps
tensors cheap to share and makes eval-mode forwards allocation-light.
"""

from __future__ import annotations

import numpy as np

from . import precision


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or precision.dtype())
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Wrap an existing array without copy or cast (internal fast path)."""
        t = cls.__new__(cls)
        t.data = array
        t.requires_grad = requires_grad
        return t

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), self.requires_grad)

    # -- light operator sugar (forwards to taped ops) ----------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.add(self, other)

    def __mul__(self, scalar: float) -> "Tensor":
        from . import ops

        return ops.scale(self, scalar)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"
