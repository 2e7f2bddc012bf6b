"""Reverse-mode differentiation over an explicit operation tape.

While a :class:`Tape` is active (as a context manager), every operation
in :mod:`oskt.numerics.ops` whose inputs require gradients appends one
record.  Records are stored in execution order, which is already a
topological order of the data dependencies, so the backward pass is a
single reverse sweep that visits each record exactly once.

Gradients accumulate per tensor identity; parameters that the loss never
reached simply read back as zero from the returned map.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


class _Stats:
    """Process-wide instrumentation counters (used to prove that student
    expansion performs no gradient work)."""

    __slots__ = ("records", "backward_calls")

    def __init__(self):
        self.records = 0
        self.backward_calls = 0


stats = _Stats()

_ACTIVE: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _ACTIVE[-1] if _ACTIVE else None


class GradMap:
    """Gradients keyed by tensor identity.

    ``get`` returns a dense zero array for tensors the backward sweep
    never reached, so optimizers can treat every parameter uniformly.
    """

    def __init__(self, grads: dict[int, tuple[Tensor, np.ndarray]]):
        self._grads = grads

    def get(self, t: Tensor) -> np.ndarray:
        entry = self._grads.get(id(t))
        if entry is None:
            return np.zeros_like(t.data)
        return entry[1]

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def items(self):
        return ((t, g) for t, g in self._grads.values())


class Tape:
    """Ordered record of differentiable operations.

    Each record is ``(output, inputs, backward_fn)`` where ``backward_fn``
    maps the output gradient to one gradient (or None) per input.  A
    tensor is the output of at most one record on a tape.
    """

    __slots__ = ("_records",)

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        if popped is not self:  # pragma: no cover - defensive
            raise ContractError("tape context exited out of order")

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self._records.append((out, tuple(inputs), backward))
        stats.records += 1

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> GradMap:
        """Accumulate d(loss)/d(tensor) for everything reachable from ``loss``.

        ``loss`` must be a scalar created while this tape was active.
        """
        if loss.size != 1:
            raise ContractError(f"backward target must be scalar, got shape {loss.shape}")
        stats.backward_calls += 1

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}

        for out, inputs, backward in reversed(self._records):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            contributions = backward(g_out)
            for tensor, contrib in zip(inputs, contributions):
                if contrib is None:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib
                    holders[key] = tensor

        return GradMap({k: (holders[k], g) for k, g in grads.items()})


def collect_parameters(tensors: Iterable[Tensor]) -> list[Tensor]:
    """Filter an iterable down to gradient-bearing tensors, deduplicated."""
    seen: dict[int, Tensor] = {}
    for t in tensors:
        if t is not None and t.requires_grad and id(t) not in seen:
            seen[id(t)] = t
    return list(seen.values())
