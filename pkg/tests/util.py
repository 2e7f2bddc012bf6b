"""Shared helpers for the test suite.

The builders here construct networks with *planted* structure: teachers
whose weight rows are exact cluster-wise duplicates (so merging them is
an algebraic identity, not an approximation) and row sets with planted
groups far enough apart that clustering must recover them exactly.
"""

from __future__ import annotations

import numpy as np

from oskt.netgraph import ModelSpec, forward, reference_teacher
from oskt.partition import clustered_units

# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(num: int, name: str, ok: bool, detail: str = "") -> bool:
    status = "PASS" if ok else "FAIL"
    line = f"[ACCEPTANCE] criterion {num:2d} ({name}): {status}"
    if detail:
        line += f" -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise relative deviation with an absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def planted_assignment(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    """Random surjective labeling of n rows onto m clusters."""
    labels = np.concatenate([np.arange(m), rng.integers(0, m, size=n - m)])
    return labels[rng.permutation(n)]


def duplicate_teacher(
    family: str,
    width: int,
    blocks: int,
    m: int,
    seed: int,
    norm: str = "none",
    num_classes: int = 5,
):
    """Teacher whose weight rows are exact cluster-wise duplicates.

    ``norm="none"`` builds without normalization layers; ``"cluster"``
    keeps them but makes every affine pair and running statistic
    constant within each cluster, so per-cluster averaging is exact.
    Returns (model, assignments) with one planted label vector per
    clustered unit, keyed by the unit's first layer index.
    """
    if norm not in ("none", "cluster"):
        raise ValueError(f"norm must be 'none' or 'cluster', got {norm!r}")
    input_shape = (3, 4, 4) if family == "cnn_like" else (12,)
    model = reference_teacher(
        family, width=width, blocks=blocks, num_classes=num_classes,
        input_shape=input_shape, seed=seed, norm=(norm == "cluster"),
    )
    rng = np.random.default_rng(seed)
    assignments: dict[int, np.ndarray] = {}
    unit_assign: dict[int, np.ndarray] = {}  # layer idx -> its unit's labels
    for members in clustered_units(model):
        n = model.layers[members[0]].out_rows
        labels = planted_assignment(rng, n, m)
        assignments[members[0]] = labels
        for i in members:
            layer = model.layers[i]
            fan_in = layer.in_dims * layer.op_params
            centers = rng.normal(size=(m, layer.in_dims, layer.op_params))
            centers *= np.sqrt(2.0 / fan_in)
            center_bias = 0.05 * rng.normal(size=m)
            rows = centers[labels]
            layer.weight.data[...] = rows.reshape(layer.weight.shape).astype(
                layer.weight.dtype
            )
            layer.bias.data[...] = center_bias[labels].astype(layer.bias.dtype)
            unit_assign[i] = labels
    if norm == "cluster":
        for layer in model.layers:
            if layer.kind != "norm":
                continue
            labels = unit_assign[layer.for_layer]
            gamma = (1.0 + 0.2 * rng.normal(size=m))[labels]
            beta = (0.1 * rng.normal(size=m))[labels]
            layer.gamma.data[...] = gamma.astype(layer.gamma.dtype)
            layer.beta.data[...] = beta.astype(layer.beta.dtype)
            if layer.norm_type == "batch":
                rm = (0.3 * rng.normal(size=m))[labels]
                rv = (0.5 + rng.random(size=m))[labels]
                layer.running_mean[...] = rm.astype(layer.running_mean.dtype)
                layer.running_var[...] = rv.astype(layer.running_var.dtype)
    return model, assignments


def eval_logits(model, x: np.ndarray) -> np.ndarray:
    out = forward(model, x, mode="eval") if isinstance(model, ModelSpec) else model.forward(x, mode="eval")
    return np.array(out.logits.data, dtype=np.float64)


def planted_rows(
    rng: np.random.Generator, m: int, per: int, d: int, ratio: float = 25.0
):
    """``m`` tight groups of ``per`` rows each, separated by at least
    ``ratio`` times their within-group spread (euclidean *and* angular).

    Returns (rows, labels, achieved_euclidean_ratio, achieved_angular_ratio).
    """
    centers = rng.normal(size=(m, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= 10.0
    diff = centers[:, None, :] - centers[None, :, :]
    sep = np.sqrt((diff**2).sum(-1))
    min_sep = sep[~np.eye(m, dtype=bool)].min()
    spread = min_sep / (2.0 * ratio)
    labels = np.repeat(np.arange(m), per)
    noise = rng.normal(size=(m * per, d))
    noise *= spread / np.maximum(np.linalg.norm(noise, axis=1, keepdims=True), 1e-12)
    noise *= rng.random(size=(m * per, 1))  # radii in [0, spread]
    rows = centers[labels] + noise
    within = np.linalg.norm(rows - centers[labels], axis=1).max()
    eratio = min_sep / max(within, 1e-12)

    def angle(u, v):
        c = (u * v).sum(-1) / (np.linalg.norm(u, axis=-1) * np.linalg.norm(v, axis=-1))
        return np.arccos(np.clip(c, -1.0, 1.0))

    ang_sep = min(
        angle(centers[i], centers[j]) for i in range(m) for j in range(i + 1, m)
    )
    ang_within = angle(rows, centers[labels]).max()
    aratio = ang_sep / max(ang_within, 1e-12)
    return rows, labels, eratio, aratio


def same_grouping(a: np.ndarray, b: np.ndarray) -> bool:
    """Two label vectors induce identical partitions (up to relabeling)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        return False
    fwd: dict[int, int] = {}
    rev: dict[int, int] = {}
    for x, y in zip(a.tolist(), b.tolist()):
        if fwd.setdefault(x, y) != y or rev.setdefault(y, x) != x:
            return False
    return True
