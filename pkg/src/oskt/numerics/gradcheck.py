"""Central finite-difference verification of tape gradients.

The checker perturbs every coordinate of every parameter, so it is meant
for desk-scale problems in double precision; tests switch the precision
mode before building the model under test.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import NumericError
from .tape import Tape
from .tensor import Tensor

REL_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: int
    worst_coord: int
    per_param: list[float] = field(default_factory=list)

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def check_gradients(
    fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4
) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` must be deterministic and side-effect free (callers are
    responsible for freezing any running statistics it touches).  The
    relative error uses an absolute floor of ``1e-8`` in the denominator
    so exact zeros compare cleanly.
    """
    with Tape() as tape:
        loss = fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("gradient check objective is not finite")
    grads = tape.backward(loss)

    worst = 0.0
    worst_param, worst_coord = -1, -1
    per_param: list[float] = []
    for pi, p in enumerate(params):
        analytic = grads.get(p).reshape(-1)
        flat = p.data.reshape(-1)
        local = 0.0
        for ci in range(flat.size):
            orig = flat[ci]
            flat[ci] = orig + eps
            f_plus = float(fn().data)
            flat[ci] = orig - eps
            f_minus = float(fn().data)
            flat[ci] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite objective while perturbing param {pi}[{ci}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(numeric), abs(analytic[ci]), REL_FLOOR)
            rel = abs(numeric - analytic[ci]) / denom
            if rel > local:
                local = rel
            if rel > worst:
                worst, worst_param, worst_coord = rel, pi, ci
        per_param.append(local)
    return GradCheckReport(worst, worst_param, worst_coord, per_param)
