"""Row clustering: k-means behavior and whole-model partitioning."""

import numpy as np
import pytest

import util
from oskt.errors import ContractError, NumericError
from oskt.netgraph import reference_teacher
from oskt.partition import (
    cluster_model,
    clustered_units,
    empty_cluster_repair,
    flattened_rows,
    kmeans,
)


def test_kmeans_recovers_planted_groups_both_metrics():
    for seed in range(8):
        rng = np.random.default_rng(seed)
        rows, labels, eratio, aratio = util.planted_rows(rng, m=4, per=5, d=16)
        assert eratio >= 10 and aratio >= 10
        for metric in ("euclidean", "cosine"):
            got, centers = kmeans(rows, 4, metric=metric, seed=seed)
            assert util.same_grouping(got, labels)
            assert centers.shape == (4, 16)


def test_kmeans_centers_are_member_means():
    rng = np.random.default_rng(0)
    rows, labels, _, _ = util.planted_rows(rng, m=3, per=4, d=8)
    assignment, centers = kmeans(rows, 3, seed=0)
    for j in range(3):
        np.testing.assert_allclose(
            centers[j], rows[assignment == j].mean(axis=0), rtol=1e-10
        )


def test_kmeans_is_deterministic_and_order_independent():
    """Same seed, permuted input rows: the induced grouping is identical."""
    rng = np.random.default_rng(42)
    rows = rng.normal(size=(20, 6))
    base, _ = kmeans(rows, 5, seed=7)
    for trial in range(5):
        perm = np.random.default_rng(trial).permutation(20)
        got, _ = kmeans(rows[perm], 5, seed=7)
        assert util.same_grouping(got, base[perm])
    again, _ = kmeans(rows, 5, seed=7)
    np.testing.assert_array_equal(base, again)


def test_kmeans_edge_widths():
    rng = np.random.default_rng(1)
    rows = rng.normal(size=(6, 3))
    one, c1 = kmeans(rows, 1, seed=0)
    assert set(one.tolist()) == {0}
    np.testing.assert_allclose(c1[0], rows.mean(axis=0), rtol=1e-10)
    full, _ = kmeans(rows, 6, seed=0)
    assert sorted(full.tolist()) == list(range(6))  # all singletons


def test_kmeans_never_returns_empty_clusters():
    # ten copies of the same point force repeated repair
    rows = np.vstack([np.zeros((10, 4)), np.ones((2, 4))])
    assignment, _ = kmeans(rows, 3, seed=0)
    assert np.bincount(assignment, minlength=3).min() >= 1


def test_kmeans_input_contracts():
    rows = np.zeros((4, 2))
    with pytest.raises(ContractError):
        kmeans(rows, 5)
    with pytest.raises(ContractError):
        kmeans(rows, 0)
    with pytest.raises(ContractError):
        kmeans(rows, 2, metric="manhattan")
    with pytest.raises(ContractError):
        kmeans(np.zeros(4), 2)
    bad = rows.copy()
    bad[0, 0] = np.nan
    with pytest.raises(NumericError):
        kmeans(bad, 2)


def test_cosine_pins_zero_rows_with_warning():
    rng = np.random.default_rng(3)
    rows = rng.normal(size=(8, 4))
    rows[2] = 0.0
    with pytest.warns(RuntimeWarning, match="zero-norm"):
        assignment, _ = kmeans(rows, 3, metric="cosine", seed=1)
    assert assignment[2] == 0


def test_empty_cluster_repair_moves_farthest_row():
    rows = np.array([[0.0, 0], [0.1, 0], [5.0, 0], [9.0, 0]])
    assignment = np.array([0, 0, 0, 0])
    centers = np.array([[0.05, 0.0], [50.0, 0.0]])
    fixed, new_centers = empty_cluster_repair(rows, assignment, centers, "euclidean")
    assert fixed[3] == 1  # the farthest row seeds the empty cluster
    np.testing.assert_array_equal(new_centers[1], rows[3])
    assert np.bincount(fixed, minlength=2).min() == 1


def test_kmeans_reports_convergence_trace():
    rng = np.random.default_rng(5)
    rows, _, _, _ = util.planted_rows(rng, m=3, per=6, d=5)
    trace: list = []
    kmeans(rows, 3, seed=2, trace=trace)
    assert trace and all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))


# ---------------------------------------------------------------------------
# model-level clustering


def test_clustered_units_merge_residual_groups():
    model = reference_teacher("cnn_like", width=8, blocks=2, num_classes=3, seed=0)
    units = clustered_units(model)
    weighted = [i for i, _ in model.weighted()]
    trunk = [i for i in weighted if model.layers[i].residual_group == 0]
    assert tuple(trunk) in units
    singles = [u for u in units if len(u) == 1]
    assert len(singles) == len(weighted) - len(trunk)


def test_flattened_rows_appends_bias():
    model = reference_teacher("mlp_like", width=6, blocks=1, num_classes=3, seed=0)
    idx = next(i for i, _ in model.weighted())
    flat = flattened_rows(model, idx)
    layer = model.layers[idx]
    assert flat.shape == (layer.out_rows, layer.in_dims + 1)
    np.testing.assert_allclose(flat[:, -1], layer.bias.data, rtol=1e-6)
    assert flat.dtype == np.float64


def test_cluster_model_shares_assignment_across_groups():
    model, planted = util.duplicate_teacher("cnn_like", 12, 2, 4, seed=0, norm="cluster")
    part = cluster_model(model, 4, seed=0)
    for unit in part.units:
        assert int(unit.sizes.sum()) == model.layers[unit.members[0]].out_rows
        assert unit.sizes.min() >= 1
        for member in unit.members:
            assert part.assignment(member) is unit.assignment
        assert util.same_grouping(unit.assignment, planted[unit.members[0]])


def test_cluster_model_centers_shapes_and_values():
    model, _ = util.duplicate_teacher("mlp_like", 10, 1, 3, seed=1, norm="none")
    part = cluster_model(model, 3, seed=1)
    for i in part.layer_indices():
        layer = model.layers[i]
        lc = part.centers[i]
        assert lc.weights.shape == (3, layer.in_dims, layer.op_params)
        assert lc.bias.shape == (3,)
        # duplicated rows: each center equals the shared member row exactly
        assignment = part.assignment(i)
        rows = flattened_rows(model, i)
        for j in range(3):
            member = rows[assignment == j][0]
            np.testing.assert_allclose(
                np.concatenate([lc.weights[j].reshape(-1), [lc.bias[j]]]),
                member, rtol=1e-6, atol=1e-7,
            )


def test_cluster_model_default_metric_follows_family():
    cnn, _ = util.duplicate_teacher("cnn_like", 8, 1, 2, seed=2, norm="none")
    assert cluster_model(cnn, 2, seed=0).metric == "euclidean"
    mlp, _ = util.duplicate_teacher("mlp_like", 8, 1, 2, seed=2, norm="none")
    assert cluster_model(mlp, 2, seed=0).metric == "cosine"


def test_cluster_model_per_layer_width_map():
    model = reference_teacher("cnn_like", width=8, blocks=1, num_classes=3, seed=3)
    weighted = [i for i, _ in model.weighted()]
    widths = {i: 4 for i in weighted}
    widths[weighted[1]] = 2  # the non-residual middle layer may differ
    part = cluster_model(model, widths, seed=0)
    assert part.n_clusters(weighted[1]) == 2
    assert part.n_clusters(weighted[0]) == 4
    # residual-group members demanding different widths is an error
    bad = dict(widths)
    bad[weighted[0]] = 3
    with pytest.raises(ContractError):
        cluster_model(model, bad, seed=0)
    with pytest.raises(ContractError):
        cluster_model(model, {weighted[0]: 4}, seed=0)  # missing layers
    with pytest.raises(ContractError):
        cluster_model(model, 99, seed=0)  # wider than the layer
