"""Row clustering: group weight rows whose functions are interchangeable.

Rows are flattened to vectors of length N_{l-1} * O_l with the row bias
appended as one extra coordinate.  Layers joined by residual additions
(same ``residual_group``) must keep aligned output spaces, so their rows
are concatenated feature-wise and clustered once, yielding a single
shared assignment for the whole group.

k-means notes:

* k-means++ seeding from a dedicated RngStream per clustered unit.
* Assignment ties break toward the lowest cluster index.
* Empty clusters are repaired by reseeding with the row farthest from
  its current center; iteration then continues.
* Rows are lexicographically sorted before Lloyd iteration and the
  labels mapped back afterwards, which makes the resulting partition
  independent of input row order for a fixed seed.
* cosine distance treats zero-norm rows as degenerate: they are pinned
  to cluster 0 with a warning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError
from .netgraph import ModelSpec, rows_view
from .numerics import RngStream
from .numerics.rng import STREAM_CLUSTER

DEFAULT_MAX_ITERS = 100


# ---------------------------------------------------------------------------
# distance helpers


def _distances(rows: np.ndarray, centers: np.ndarray, metric: str) -> np.ndarray:
    """Pairwise distances (n_rows, n_centers); squared euclidean or cosine."""
    if metric == "euclidean":
        diff = rows[:, None, :] - centers[None, :, :]
        return np.einsum("nkd,nkd->nk", diff, diff)
    row_norms = np.linalg.norm(rows, axis=1)
    center_norms = np.linalg.norm(centers, axis=1)
    denom = np.outer(row_norms, center_norms)
    sims = np.divide(rows @ centers.T, denom, out=np.zeros_like(denom), where=denom > 0)
    return 1.0 - sims


def _assign(dist: np.ndarray, zero_rows: np.ndarray | None) -> np.ndarray:
    assignment = dist.argmin(axis=1)  # argmin breaks ties toward lower index
    if zero_rows is not None and zero_rows.any():
        assignment[zero_rows] = 0
    return assignment


def _means(rows: np.ndarray, assignment: np.ndarray, k: int) -> np.ndarray:
    centers = np.zeros((k, rows.shape[1]), dtype=rows.dtype)
    np.add.at(centers, assignment, rows)
    counts = np.bincount(assignment, minlength=k)
    return centers / np.maximum(counts, 1)[:, None]


def empty_cluster_repair(
    rows: np.ndarray,
    assignment: np.ndarray,
    centers: np.ndarray,
    metric: str,
    frozen_rows: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Reseed each empty cluster with the row farthest from its center.

    The moved row becomes the cluster's center, so the within-cluster
    error never increases.  Rows in ``frozen_rows`` and rows that are the
    sole member of their cluster are not eligible to move.
    """
    k = centers.shape[0]
    counts = np.bincount(assignment, minlength=k)
    empties = np.flatnonzero(counts == 0)
    if empties.size == 0:
        return assignment, centers
    assignment = assignment.copy()
    centers = centers.copy()
    for j in empties:
        dist = _distances(rows, centers, metric)
        to_own = dist[np.arange(rows.shape[0]), assignment]
        eligible = counts[assignment] > 1
        if frozen_rows is not None:
            eligible &= ~frozen_rows
        if not eligible.any():  # pragma: no cover - k <= n guarantees a donor
            raise ContractError("no eligible row to repair an empty cluster")
        to_own = np.where(eligible, to_own, -np.inf)
        mover = int(to_own.argmax())
        counts[assignment[mover]] -= 1
        assignment[mover] = j
        counts[j] = 1
        centers[j] = rows[mover]
    return assignment, centers


# ---------------------------------------------------------------------------
# k-means


def kmeans(
    rows,
    k: int,
    metric: str = "euclidean",
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
    trace: list | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Cluster rows into ``k`` groups; returns (assignment, centers).

    Centers are arithmetic means of their members under both metrics and
    no cluster comes back empty.  ``trace``, when given, collects the
    within-cluster squared-error after every center update.
    """
    data = np.asarray(rows.data if hasattr(rows, "data") and not isinstance(rows, np.ndarray) else rows)
    x = np.ascontiguousarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"kmeans expects a 2-D row matrix, got shape {x.shape}")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"kmeans needs 1 <= k <= n_rows, got k={k}, n={n}")
    if metric not in ("euclidean", "cosine"):
        raise ContractError(f"metric must be 'euclidean' or 'cosine', got {metric!r}")
    if not np.isfinite(x).all():
        raise NumericError("kmeans input contains non-finite values")

    # canonical row order -> partition independent of input permutation
    order = np.lexsort(x.T[::-1])
    xs = x[order]

    zero_rows = None
    if metric == "cosine":
        zero_rows = np.linalg.norm(xs, axis=1) == 0
        if zero_rows.any():
            warnings.warn(
                f"{int(zero_rows.sum())} zero-norm rows pinned to cluster 0 under cosine metric",
                RuntimeWarning,
                stacklevel=2,
            )

    rng = RngStream(seed, STREAM_CLUSTER)
    centers = _kmeanspp(xs, k, metric, rng)
    assignment = _assign(_distances(xs, centers, metric), zero_rows)
    assignment, centers = empty_cluster_repair(xs, assignment, centers, metric, zero_rows)

    for _ in range(max_iters):
        centers = _means(xs, assignment, k)
        dist = _distances(xs, centers, metric)
        if trace is not None:
            trace.append(float(dist[np.arange(n), assignment].sum()))
        new_assignment = _assign(dist, zero_rows)
        new_assignment, centers = empty_cluster_repair(
            xs, new_assignment, centers, metric, zero_rows
        )
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment

    centers = _means(xs, assignment, k)
    out = np.empty(n, dtype=np.int64)
    out[order] = assignment
    return out, centers


def _kmeanspp(x: np.ndarray, k: int, metric: str, rng: RngStream) -> np.ndarray:
    """Standard k-means++ seeding using the clustering metric's distance."""
    n = x.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    best = _distances(x, x[chosen[0]][None], metric)[:, 0]
    for j in range(1, k):
        weights = np.maximum(best, 0.0) ** 2
        total = weights.sum()
        if total <= 0:
            # all remaining rows coincide with a chosen center
            chosen[j] = rng.integers(n)
        else:
            u = rng.random() * total
            chosen[j] = int(np.searchsorted(np.cumsum(weights), u, side="right").clip(0, n - 1))
        d_new = _distances(x, x[chosen[j]][None], metric)[:, 0]
        best = np.minimum(best, d_new)
    return x[chosen].copy()


# ---------------------------------------------------------------------------
# model-level clustering


@dataclass
class PartitionUnit:
    """One clustered unit: a weighted layer, or a whole residual group."""

    members: tuple[int, ...]  # layer indices, ascending
    assignment: np.ndarray  # (N,) cluster per row, shared by every member
    sizes: np.ndarray  # (M,) rows per cluster


@dataclass
class LayerCenters:
    weights: np.ndarray  # (M, N_in, O)
    bias: np.ndarray  # (M,)


@dataclass
class RowPartition:
    metric: str
    units: list[PartitionUnit]
    centers: dict[int, LayerCenters]
    unit_of: dict[int, int]

    def assignment(self, layer_idx: int) -> np.ndarray:
        return self.units[self.unit_of[layer_idx]].assignment

    def sizes(self, layer_idx: int) -> np.ndarray:
        return self.units[self.unit_of[layer_idx]].sizes

    def n_clusters(self, layer_idx: int) -> int:
        return int(self.sizes(layer_idx).shape[0])

    def layer_indices(self) -> list[int]:
        return sorted(self.unit_of)


def flattened_rows(model: ModelSpec, layer_idx: int) -> np.ndarray:
    """Rows of one layer as (N, N_in*O + 1) float64, bias appended."""
    layer = model.layers[layer_idx]
    rows = rows_view(model, layer_idx).data.reshape(layer.out_rows, -1)
    bias = layer.bias.data.reshape(-1, 1)
    return np.hstack([rows, bias]).astype(np.float64)


def clustered_units(model: ModelSpec) -> list[tuple[int, ...]]:
    """Weighted layers grouped into clustered units (residual groups merge)."""
    groups: dict[int, list[int]] = {}
    singles: list[tuple[int, ...]] = []
    for i, layer in model.weighted():
        if layer.residual_group is None:
            singles.append((i,))
        else:
            groups.setdefault(layer.residual_group, []).append(i)
    units = [tuple(sorted(v)) for _, v in sorted(groups.items())] + singles
    return sorted(units, key=lambda u: u[0])


def cluster_model(
    model: ModelSpec,
    chain_width,
    metric: str | None = None,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> RowPartition:
    """Cluster every weighted layer's rows (head excluded).

    ``chain_width`` is either one M for all units or a mapping from layer
    index to M; members of a residual group must agree.  The default
    metric is euclidean for cnn_like and cosine for mlp_like.
    """
    if metric is None:
        metric = "euclidean" if model.family == "cnn_like" else "cosine"

    def m_for(layer_idx: int) -> int:
        if isinstance(chain_width, dict):
            if layer_idx not in chain_width:
                raise ContractError(f"chain_width mapping missing layer {layer_idx}")
            return int(chain_width[layer_idx])
        return int(chain_width)

    units: list[PartitionUnit] = []
    centers: dict[int, LayerCenters] = {}
    unit_of: dict[int, int] = {}
    for ordinal, members in enumerate(clustered_units(model)):
        ms = {m_for(i) for i in members}
        if len(ms) != 1:
            raise ContractError(f"residual group {members} requested mixed widths {sorted(ms)}")
        m = ms.pop()
        n = model.layers[members[0]].out_rows
        if not 1 <= m <= n:
            raise ContractError(f"chain width {m} out of range for unit {members} with {n} rows")
        segments = [flattened_rows(model, i) for i in members]
        joint = np.hstack(segments)
        assignment, joint_centers = kmeans(
            joint, m, metric=metric, seed=seed + ordinal, max_iters=max_iters
        )
        sizes = np.bincount(assignment, minlength=m)
        unit = PartitionUnit(members=members, assignment=assignment, sizes=sizes)
        offset = 0
        for i, seg in zip(members, segments):
            width = seg.shape[1]
            block = joint_centers[:, offset : offset + width]
            offset += width
            layer = model.layers[i]
            centers[i] = LayerCenters(
                weights=np.ascontiguousarray(
                    block[:, :-1].reshape(m, layer.in_dims, layer.op_params)
                ),
                bias=np.ascontiguousarray(block[:, -1]),
            )
            unit_of[i] = len(units)
        units.append(unit)
    return RowPartition(metric=metric, units=units, centers=centers, unit_of=unit_of)
