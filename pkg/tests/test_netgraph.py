"""Network construction, forwards, structure analysis, and losses."""

import numpy as np
import pytest

from oskt.errors import ContractError, DimensionError
from oskt.netgraph import (
    build_skeleton,
    cols_view,
    feature_owner,
    forward,
    id_loss,
    input_owner_map,
    parameters,
    reference_teacher,
    rows_view,
    triplet_hard_loss,
    validate_model,
)
from oskt.numerics import Tensor


def test_reference_teachers_are_seed_deterministic():
    for family in ("cnn_like", "mlp_like"):
        a = reference_teacher(family, width=8, blocks=1, num_classes=4, seed=3)
        b = reference_teacher(family, width=8, blocks=1, num_classes=4, seed=3)
        for pa, pb in zip(parameters(a), parameters(b)):
            np.testing.assert_array_equal(pa.data, pb.data)
        c = reference_teacher(family, width=8, blocks=1, num_classes=4, seed=4)
        assert any(
            not np.array_equal(pa.data, pc.data)
            for pa, pc in zip(parameters(a), parameters(c))
        )


def test_forward_shapes_cnn():
    model = reference_teacher("cnn_like", width=8, blocks=2, num_classes=5,
                              input_shape=(3, 4, 4), seed=0)
    x = np.random.default_rng(0).normal(size=(6, 3, 4, 4))
    out = forward(model, x, mode="eval")
    assert out.features.shape == (6, 8)
    assert out.logits.shape == (6, 5)


def test_forward_shapes_mlp():
    model = reference_teacher("mlp_like", width=10, blocks=1, num_classes=3,
                              input_shape=(7,), seed=1)
    x = np.random.default_rng(1).normal(size=(4, 7))
    out = forward(model, x, mode="eval")
    assert out.features.shape == (4, 10)
    assert out.logits.shape == (4, 3)


def test_forward_rejects_wrong_input_shape():
    model = reference_teacher("cnn_like", width=8, blocks=1, num_classes=3, seed=0)
    with pytest.raises(DimensionError):
        forward(model, np.zeros((2, 3, 5, 5)))
    with pytest.raises(ContractError):
        forward(model, np.zeros((2, *model.input_shape)), mode="predict")


def test_train_mode_updates_running_stats_eval_does_not():
    model = reference_teacher("cnn_like", width=8, blocks=1, num_classes=3, seed=2)
    norm = next(l for l in model.layers if l.kind == "norm")
    before = norm.running_mean.copy()
    x = np.random.default_rng(2).normal(size=(4, *model.input_shape))
    forward(model, x, mode="eval")
    np.testing.assert_array_equal(norm.running_mean, before)
    forward(model, x, mode="train")
    assert not np.array_equal(norm.running_mean, before)
    # train mode with the update explicitly disabled keeps buffers frozen
    frozen = norm.running_mean.copy()
    forward(model, x, mode="train", update_running=False)
    np.testing.assert_array_equal(norm.running_mean, frozen)


def test_eval_forward_with_and_without_norm_layers():
    plain = reference_teacher("mlp_like", width=8, blocks=1, num_classes=3,
                              seed=5, norm=False)
    assert all(l.kind != "norm" for l in plain.layers)
    x = np.random.default_rng(5).normal(size=(3, *plain.input_shape))
    out = forward(plain, x)
    assert np.isfinite(out.logits.data).all()


def test_rows_view_aliases_storage():
    model = reference_teacher("cnn_like", width=8, blocks=1, num_classes=3, seed=0)
    idx = next(i for i, _ in model.weighted())
    rows = rows_view(model, idx)
    layer = model.layers[idx]
    assert rows.shape == (layer.out_rows, layer.in_dims, layer.op_params)
    rows.data[0, 0, 0] = 123.0
    assert layer.weight.data.reshape(rows.shape)[0, 0, 0] == 123.0
    with pytest.raises(ContractError):
        rows_view(model, len(model.layers) - 1)  # an activation, not weighted


def test_cols_view_slices_consumers():
    model = reference_teacher("mlp_like", width=8, blocks=1, num_classes=3, seed=0)
    weighted = [i for i, _ in model.weighted()]
    second = weighted[1]
    col = cols_view(model, second, 3)
    np.testing.assert_array_equal(col, model.layers[second].weight.data[:, 3])
    with pytest.raises(ContractError):
        cols_view(model, second, 99)


def test_input_owner_map_follows_dimension_flow():
    model = reference_teacher("cnn_like", width=8, blocks=2, num_classes=3, seed=0)
    owners = input_owner_map(model)
    weighted = [i for i, _ in model.weighted()]
    assert owners[weighted[0]] is None  # stem reads the raw input
    for prev, cur in zip(weighted, weighted[1:]):
        assert owners[cur] == prev
    assert feature_owner(model) == weighted[-1]


def test_residual_groups_share_width_and_partnering():
    model = reference_teacher("cnn_like", width=8, blocks=1, num_classes=3, seed=0)
    validate_model(model)
    grouped = [l for _, l in model.weighted() if l.residual_group == 0]
    assert len(grouped) >= 2
    assert len({l.out_rows for l in grouped}) == 1
    # breaking the alignment must be caught
    bad = build_skeleton("cnn_like", [8, 6, 8], 1, 3, (3, 4, 4))
    bad.layers[0].residual_group = 1  # stem leaves the trunk group
    with pytest.raises(ContractError):
        validate_model(bad)


def test_build_skeleton_rejects_bad_requests():
    with pytest.raises(ContractError):
        build_skeleton("cnn_like", [8, 8], 1, 3, (3, 4, 4))  # wrong width count
    with pytest.raises(ContractError):
        build_skeleton("cnn_like", [8, 8, 6], 1, 3, (3, 4, 4))  # trunk disagrees
    with pytest.raises(ContractError):
        build_skeleton("rnn_like", [8, 8, 8], 1, 3, (3, 4, 4))
    with pytest.raises(ContractError):
        reference_teacher("cnn_like", width=2, blocks=1, num_classes=3)


def test_parameters_cover_everything_once():
    model = reference_teacher("cnn_like", width=8, blocks=1, num_classes=3, seed=0)
    params = parameters(model)
    assert len({id(p) for p in params}) == len(params)
    n_weighted = len(list(model.weighted()))
    n_norm = sum(1 for l in model.layers if l.kind == "norm")
    assert len(params) == 2 * n_weighted + 2 * n_norm + 2  # + head pair
    assert all(p.requires_grad for p in params)


def test_loss_wrappers_are_finite_on_real_batches():
    model = reference_teacher("cnn_like", width=8, blocks=1, num_classes=4, seed=0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, *model.input_shape))
    labels = np.repeat(np.arange(4), 2)
    out = forward(model, x, mode="train")
    total = float(id_loss(out.logits, labels).data) + float(
        triplet_hard_loss(out.features, labels, 0.3).data
    )
    assert np.isfinite(total)


def test_residual_add_uses_model_input_when_flagged():
    """skip_from = -1 adds the raw input tensor back in."""
    model = build_skeleton("mlp_like", [7, 7, 7], 1, 3, (7,), norm=False)
    for _, layer in model.weighted():
        layer.weight.data[...] = 0.0
    add = next(l for l in model.layers if l.kind == "residual_add")
    add.skip_from = -1
    x = np.random.default_rng(3).normal(size=(2, 7))
    out = forward(model, x)
    np.testing.assert_allclose(out.features.data, x, rtol=1e-6)
