"""Computation-free expansion of a weight chain into students of any
intermediate width.

Given the refined chain (one row stack per weighted layer, M rows) and a
target width C with M <= C <= N (the teacher width), each cluster j is
apportioned r_j output copies with sum r_j = C, and its teacher-column
member set is split into r_j contiguous groups.  Student weights are then
pure index-and-sum products of chain rows: output side stacks cluster
rows by copy count, input side sums chain columns over the predecessor's
groups.  Norm affine pairs and running statistics become per-cluster
means of the teacher's.  No forward or backward pass is involved; the
whole procedure is a few gathers and reductions per layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .netgraph import (
    ModelSpec,
    build_skeleton,
    feature_owner,
    forward,
    input_owner_map,
)
from .numerics import Tensor
from .partition import RowPartition
from .weightchain import WeightChain


def apportion(sizes, c: int) -> np.ndarray:
    """Split ``c`` copies among clusters proportionally to their sizes.

    Largest-remainder rule over quotas q_j = c * n_j / N, with every
    cluster guaranteed at least one copy and at most n_j copies.  Surplus
    seats go to the largest remainders (ties: larger cluster, then lower
    index); when the minimum-one floor overshoots, seats are taken back
    from the smallest remainders (ties mirrored), never dropping a
    cluster below one copy.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    if sizes.ndim != 1 or sizes.size == 0:
        raise ContractError("sizes must be a non-empty 1-D array")
    if (sizes < 1).any():
        raise ContractError("every cluster must have at least one row")
    m, n = sizes.size, int(sizes.sum())
    if not m <= c <= n:
        raise ContractError(f"target width {c} out of range [{m}, {n}]")
    quotas = c * sizes / n
    base = np.minimum(sizes, np.maximum(1, np.floor(quotas).astype(np.int64)))
    remainder = quotas - base

    def grant_order():
        # descending remainder; ties: larger cluster, then lower index
        return sorted(range(m), key=lambda j: (-remainder[j], -sizes[j], j))

    def take_order():
        return sorted(range(m), key=lambda j: (remainder[j], sizes[j], -j))

    counts = base.copy()
    while counts.sum() < c:
        progressed = False
        for j in grant_order():
            if counts.sum() == c:
                break
            if counts[j] < sizes[j]:
                counts[j] += 1
                progressed = True
        if not progressed:  # pragma: no cover - c <= n guarantees capacity
            raise ContractError("apportionment cannot reach the target width")
    while counts.sum() > c:
        progressed = False
        for j in take_order():
            if counts.sum() == c:
                break
            if counts[j] > 1:
                counts[j] -= 1
                progressed = True
        if not progressed:  # pragma: no cover - c >= m guarantees room
            raise ContractError("apportionment cannot shrink to the target width")
    return counts


@dataclass
class UnitMatcher:
    """Copy counts and column groups for one clustered unit."""

    members: tuple[int, ...]  # weighted layer indices sharing this matcher
    counts: np.ndarray  # (M,) copies per cluster, sum == target_width
    groups: list[list[np.ndarray]]  # [cluster][copy] -> teacher column indices
    target_width: int

    def flat_groups(self) -> list[np.ndarray]:
        """Groups in student-unit order (clusters ascending, copies in order)."""
        return [g for per_cluster in self.groups for g in per_cluster]

    def repeat_index(self) -> np.ndarray:
        """Chain-row index for every student unit."""
        return np.repeat(np.arange(self.counts.size), self.counts)


@dataclass
class Matcher:
    partition: RowPartition
    units: list[UnitMatcher]

    def for_layer(self, layer_idx: int) -> UnitMatcher:
        return self.units[self.partition.unit_of[layer_idx]]


def build_matcher(partition: RowPartition, widths) -> Matcher:
    """Target widths -> matcher.  ``widths`` is one C for all units or a
    mapping from layer index to C; residual-group members must agree."""

    def c_for(layer_idx: int) -> int:
        if isinstance(widths, dict):
            if layer_idx not in widths:
                raise ContractError(f"width mapping missing layer {layer_idx}")
            return int(widths[layer_idx])
        return int(widths)

    units: list[UnitMatcher] = []
    for unit in partition.units:
        cs = {c_for(i) for i in unit.members}
        if len(cs) != 1:
            raise ContractError(
                f"residual group {unit.members} requested mixed widths {sorted(cs)}"
            )
        c = cs.pop()
        counts = apportion(unit.sizes, c)
        groups = []
        for j in range(unit.sizes.size):
            members = np.flatnonzero(unit.assignment == j)
            groups.append([g for g in np.array_split(members, counts[j])])
        units.append(
            UnitMatcher(members=unit.members, counts=counts, groups=groups, target_width=c)
        )
    return Matcher(partition=partition, units=units)


def _mean_over_clusters(values: np.ndarray, assignment: np.ndarray, m: int) -> np.ndarray:
    sums = np.zeros(m, dtype=np.float64)
    np.add.at(sums, assignment, values.astype(np.float64))
    return sums / np.bincount(assignment, minlength=m)


def expand(chain: WeightChain, teacher: ModelSpec, matcher: Matcher) -> ModelSpec:
    """Materialize the student selected by ``matcher``.

    Pure array indexing and summation over the chain rows and the
    teacher's norm/head parameters -- no forward passes, no gradients,
    and cost independent of any training set.
    """
    part = chain.partition
    owners = input_owner_map(teacher)
    fo = feature_owner(teacher)

    widths = [
        matcher.for_layer(i).target_width
        for i, ly in enumerate(teacher.layers)
        if ly.kind in ("conv", "dense")
    ]
    student = build_skeleton(
        teacher.family,
        widths,
        teacher.blocks,
        teacher.num_classes,
        tuple(teacher.input_shape),
        norm=any(ly.kind == "norm" for ly in teacher.layers),
    )

    for i, t_layer in enumerate(teacher.layers):
        s_layer = student.layers[i]
        if t_layer.kind in ("conv", "dense"):
            um = matcher.for_layer(i)
            rep = um.repeat_index()
            rows = chain.rows[i].data[rep]  # (C, N_in_teacher, O)
            owner = owners[i]
            if owner is None:
                cols = rows  # raw input: columns pass through untouched
            else:
                pm = matcher.for_layer(owner)
                segments = [rows[:, g, :].sum(axis=1) for g in pm.flat_groups()]
                cols = np.stack(segments, axis=1)  # (C, C_in, O)
            if t_layer.kind == "conv":
                k = t_layer.kernel_size
                s_layer.weight.data[...] = cols.reshape(cols.shape[0], cols.shape[1], k, k)
            else:
                s_layer.weight.data[...] = cols[:, :, 0]
            s_layer.bias.data[...] = chain.bias[i].data[rep]
        elif t_layer.kind == "norm":
            um = matcher.for_layer(t_layer.for_layer)
            assignment = part.assignment(t_layer.for_layer)
            m = part.n_clusters(t_layer.for_layer)
            rep = um.repeat_index()
            for name in ("gamma", "beta"):
                src = getattr(t_layer, name).data
                getattr(s_layer, name).data[...] = _mean_over_clusters(src, assignment, m)[
                    rep
                ].astype(src.dtype)
            if t_layer.norm_type == "batch":
                for name in ("running_mean", "running_var"):
                    src = getattr(t_layer, name)
                    setattr(
                        s_layer,
                        name,
                        _mean_over_clusters(src, assignment, m)[rep].astype(src.dtype),
                    )

    head_m = matcher.for_layer(fo)
    head_w = teacher.head.weight.data
    segments = [head_w[:, g].sum(axis=1) for g in head_m.flat_groups()]
    student.head.weight.data[...] = np.stack(segments, axis=1)
    student.head.bias.data[...] = teacher.head.bias.data
    return student


def expand_widths(chain: WeightChain, teacher: ModelSpec, widths_list) -> list[ModelSpec]:
    """One student per requested width, all from the same chain."""
    return [expand(chain, teacher, build_matcher(chain.partition, w)) for w in widths_list]


def chain_width_schedule(a: int, b: int, s: int) -> list[int]:
    """Geometric ladder of ``s`` chain widths from ``a`` toward ``b``.

    Solves a * x**s = b for the ratio x and returns a, a*x, ..., a*x**(s-1),
    rounded; ``b`` itself is excluded -- that endpoint is the full-width
    network the chains are refined from.
    """
    if a < 1 or b < a:
        raise ContractError(f"need 1 <= a <= b, got a={a}, b={b}")
    if s < 1:
        raise ContractError(f"need at least one step, got {s}")
    x = (b / a) ** (1.0 / s)
    return [int(round(a * x**i)) for i in range(s)]


def refresh_running_stats(model: ModelSpec, x, passes: int = 25, batch_size: int = 64) -> None:
    """Re-estimate batch-norm running statistics from data.

    The expanded student's running stats are per-cluster means of the
    teacher's, which is exact for cluster-identical teachers and an
    approximation otherwise; a few train-mode passes (weights untouched,
    no gradients) move them to the student's own activation statistics.
    Layer-norm models have no running state, so this is a no-op for them.
    """
    data = x if isinstance(x, np.ndarray) else x.x
    for _ in range(passes):
        for s in range(0, data.shape[0], batch_size):
            batch = data[s : s + batch_size]
            if batch.shape[0] < 2:
                continue
            forward(model, Tensor(batch), mode="train", update_running=True)
