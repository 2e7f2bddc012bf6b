"""Unified network representation and reference architectures.

Every network is a flat list of layer specs plus an optional classifier
head.  Weighted layers (conv, dense) expose a *rows view*: row ``k`` of
layer ``l`` is the slice of parameters that generates feature ``k``,
shaped (N_l, N_{l-1}, O_l) with O_l = K*K for convolutions and 1 for
dense layers.  Rows are the unit of clustering; the matching *columns*
of the next layer consume those features and are the unit of summation
when rows are merged.

Residual additions force the participating output spaces to stay
aligned, which the specs encode as a shared ``residual_group`` id on the
weighted layers whose rows feed the same stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ContractError, DimensionError
from .numerics import RngStream, Tensor, ops
from .numerics.precision import dtype as _dtype
from .numerics.rng import STREAM_TEACHER_INIT

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LN_EPS = 1e-6

FAMILIES = ("cnn_like", "mlp_like")


# ---------------------------------------------------------------------------
# layer specs


@dataclass
class ConvSpec:
    weight: Tensor  # (out, in, K, K)
    bias: Tensor  # (out,)
    stride: int = 1
    pad: int = 1
    residual_group: int | None = None
    norm_kind: str = "none"

    kind = "conv"

    @property
    def out_rows(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dims(self) -> int:
        return self.weight.shape[1]

    @property
    def op_params(self) -> int:
        return self.weight.shape[2] * self.weight.shape[3]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


@dataclass
class DenseSpec:
    weight: Tensor  # (out, in)
    bias: Tensor  # (out,)
    residual_group: int | None = None
    norm_kind: str = "none"

    kind = "dense"

    @property
    def out_rows(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dims(self) -> int:
        return self.weight.shape[1]

    @property
    def op_params(self) -> int:
        return 1


@dataclass
class NormSpec:
    norm_type: str  # "batch" | "layer"
    gamma: Tensor
    beta: Tensor
    for_layer: int  # weighted layer whose rows own these feature dims
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    kind = "norm"

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]


@dataclass
class ActSpec:
    act: str  # "relu" | "gelu"

    kind = "activation"


@dataclass
class ResidualAddSpec:
    skip_from: int  # layer index whose output is added; -1 means the model input

    kind = "residual_add"


@dataclass
class ModelSpec:
    family: str
    layers: list
    head: DenseSpec | None
    embedding_dim: int
    num_classes: int
    input_shape: tuple  # (C, H, W) for cnn_like, (D,) for mlp_like
    blocks: int = 0

    def weighted(self) -> Iterator[tuple[int, object]]:
        for i, layer in enumerate(self.layers):
            if layer.kind in ("conv", "dense"):
                yield i, layer


@dataclass
class ForwardOutput:
    features: Tensor
    logits: Tensor | None


# ---------------------------------------------------------------------------
# views


def rows_view(model: ModelSpec, layer_idx: int) -> Tensor:
    """Weight rows of a weighted layer as (N_l, N_{l-1}, O_l), aliasing storage."""
    layer = model.layers[layer_idx]
    if layer.kind == "conv":
        w = layer.weight.data
        return Tensor._wrap(
            w.reshape(w.shape[0], w.shape[1], w.shape[2] * w.shape[3]), layer.weight.requires_grad
        )
    if layer.kind == "dense":
        w = layer.weight.data
        return Tensor._wrap(w.reshape(w.shape[0], w.shape[1], 1), layer.weight.requires_grad)
    raise ContractError(f"layer {layer_idx} is {layer.kind!r}, not a weighted layer")


def cols_view(model: ModelSpec, layer_idx: int, in_dim: int):
    """The slice of a weighted layer that consumes input dimension ``in_dim``.

    Dense layers return the column vector (N_l,); conv layers the
    per-channel kernel stack (N_l, K, K).  Both alias the stored weights.
    """
    layer = model.layers[layer_idx]
    if layer.kind not in ("conv", "dense"):
        raise ContractError(f"layer {layer_idx} is {layer.kind!r}, not a weighted layer")
    if not 0 <= in_dim < layer.in_dims:
        raise ContractError(f"input dim {in_dim} out of range for layer {layer_idx}")
    return layer.weight.data[:, in_dim]


# ---------------------------------------------------------------------------
# forward


def forward(
    model: ModelSpec, batch, mode: str = "eval", update_running: bool | None = None
) -> ForwardOutput:
    """Run the network; returns embedding features and (if a head exists) logits."""
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    if update_running is None:
        update_running = training
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.shape[1:] != tuple(model.input_shape):
        raise DimensionError(
            f"batch shape {x.shape} does not match model input {model.input_shape}"
        )

    outputs: list[Tensor] = []
    h = x
    for layer in model.layers:
        if layer.kind == "conv":
            h = ops.conv2d(h, layer.weight, layer.stride, layer.pad)
            h = ops.add_channel_bias(h, layer.bias)
        elif layer.kind == "dense":
            h = ops.linear(h, layer.weight, layer.bias)
        elif layer.kind == "norm":
            if layer.norm_type == "batch":
                h = ops.batch_norm(
                    h,
                    layer.gamma,
                    layer.beta,
                    layer.running_mean,
                    layer.running_var,
                    layer.momentum,
                    layer.eps,
                    training=training,
                    update_running=update_running,
                )
            else:
                h = ops.layer_norm(h, layer.gamma, layer.beta, layer.eps)
        elif layer.kind == "activation":
            h = ops.relu(h) if layer.act == "relu" else ops.gelu(h)
        elif layer.kind == "residual_add":
            skip = x if layer.skip_from < 0 else outputs[layer.skip_from]
            h = ops.add(h, skip)
        else:  # pragma: no cover - construction guards against this
            raise ContractError(f"unknown layer kind {layer.kind!r}")
        outputs.append(h)

    features = ops.global_avg_pool(h) if model.family == "cnn_like" else h
    logits = None
    if model.head is not None:
        logits = ops.linear(features, model.head.weight, model.head.bias)
    return ForwardOutput(features=features, logits=logits)


# ---------------------------------------------------------------------------
# losses (thin wrappers so callers only import this module)


def id_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Identity classification loss: mean softmax cross-entropy."""
    return ops.softmax_cross_entropy(logits, labels)


def triplet_hard_loss(features: Tensor, labels: np.ndarray, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss on raw features (see numerics.ops)."""
    return ops.batch_hard_triplet(features, labels, margin)


# ---------------------------------------------------------------------------
# structure analysis


def input_owner_map(model: ModelSpec) -> dict[int, int | None]:
    """For each weighted layer, the weighted layer whose rows span its
    input dimensions (None when it reads the raw model input)."""
    owners: dict[int, int | None] = {}
    owner_at: list[int | None] = []
    current: int | None = None
    for i, layer in enumerate(model.layers):
        if layer.kind in ("conv", "dense"):
            owners[i] = current
            current = i
        elif layer.kind == "residual_add":
            skip_owner = None if layer.skip_from < 0 else owner_at[layer.skip_from]
            cg = model.layers[current].residual_group if current is not None else None
            sg = (
                model.layers[skip_owner].residual_group
                if skip_owner is not None
                else None
            )
            if current is None or skip_owner is None or cg is None or cg != sg:
                raise ContractError(
                    f"residual add at layer {i} joins streams with unaligned rows"
                )
        owner_at.append(current)
    return owners


def feature_owner(model: ModelSpec) -> int:
    """The weighted layer whose rows span the embedding features."""
    current = None
    for i, layer in enumerate(model.layers):
        if layer.kind in ("conv", "dense"):
            current = i
    if current is None:
        raise ContractError("model has no weighted layers")
    return current


def parameters(model: ModelSpec) -> list[Tensor]:
    """All trainable tensors (weights, biases, norm affine pairs, head)."""
    out: list[Tensor] = []
    for layer in model.layers:
        if layer.kind in ("conv", "dense"):
            out.extend([layer.weight, layer.bias])
        elif layer.kind == "norm":
            out.extend([layer.gamma, layer.beta])
    if model.head is not None:
        out.extend([model.head.weight, model.head.bias])
    return out


def validate_model(model: ModelSpec) -> None:
    """Structural invariants: dimension chaining and residual alignment."""
    if model.family not in FAMILIES:
        raise ContractError(f"unknown family {model.family!r}")
    widths = {}
    for i, layer in model.weighted():
        if layer.residual_group is not None:
            widths.setdefault(layer.residual_group, set()).add(layer.out_rows)
    for group, sizes in widths.items():
        if len(sizes) != 1:
            raise ContractError(f"residual group {group} has mixed widths {sorted(sizes)}")
    input_owner_map(model)  # raises on unaligned residual adds


# ---------------------------------------------------------------------------
# reference architectures


def _he_init(rng: RngStream, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(shape, scale=np.sqrt(2.0 / fan_in))


def _glorot_init(rng: RngStream, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(shape, scale=np.sqrt(2.0 / (fan_in + fan_out)))


def _norm_layer(norm_type: str, dim: int, for_layer: int) -> NormSpec:
    dt = _dtype()
    spec = NormSpec(
        norm_type=norm_type,
        gamma=Tensor(np.ones(dim), requires_grad=True),
        beta=Tensor(np.zeros(dim), requires_grad=True),
        for_layer=for_layer,
        eps=BN_EPS if norm_type == "batch" else LN_EPS,
    )
    if norm_type == "batch":
        spec.running_mean = np.zeros(dim, dtype=dt)
        spec.running_var = np.ones(dim, dtype=dt)
    return spec


def build_skeleton(
    family: str,
    widths: list[int],
    blocks: int,
    num_classes: int,
    input_shape: tuple,
    norm: bool = True,
) -> ModelSpec:
    """Architecture with zero-filled weights; ``widths`` holds the output
    width of every weighted layer in order (trunk widths must agree).
    ``norm=False`` omits every normalization layer."""
    if family not in FAMILIES:
        raise ContractError(f"family must be one of {FAMILIES}, got {family!r}")
    if blocks < 1:
        raise ContractError(f"blocks must be >= 1, got {blocks}")
    expected = 1 + 2 * blocks
    if len(widths) != expected:
        raise ContractError(f"{family} with {blocks} blocks needs {expected} widths")
    trunk = [widths[0]] + [widths[2 + 2 * b] for b in range(blocks)]
    if len(set(trunk)) != 1:
        raise ContractError(f"residual trunk widths must agree, got {trunk}")

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    layers: list = []
    nk = {"cnn_like": "batch", "mlp_like": "layer"}[family] if norm else None
    if family == "cnn_like":
        c_in = input_shape[0]
        w0 = widths[0]
        layers.append(
            ConvSpec(zeros(w0, c_in, 3, 3), zeros(w0), 1, 1, residual_group=0, norm_kind=nk)
        )
        if norm:
            layers.append(_norm_layer("batch", w0, 0))
        layers.append(ActSpec("relu"))
        for b in range(blocks):
            entry = len(layers) - 1  # activation closing the previous segment
            wa, wb = widths[1 + 2 * b], widths[2 + 2 * b]
            i1 = len(layers)
            layers.append(ConvSpec(zeros(wa, w0, 3, 3), zeros(wa), 1, 1, None, nk))
            if norm:
                layers.append(_norm_layer("batch", wa, i1))
            layers.append(ActSpec("relu"))
            i2 = len(layers)
            layers.append(ConvSpec(zeros(wb, wa, 3, 3), zeros(wb), 1, 1, 0, nk))
            if norm:
                layers.append(_norm_layer("batch", wb, i2))
            layers.append(ResidualAddSpec(skip_from=entry))
            layers.append(ActSpec("relu"))
        head = DenseSpec(zeros(num_classes, w0), zeros(num_classes))
        model = ModelSpec("cnn_like", layers, head, w0, num_classes, tuple(input_shape), blocks)
    else:
        d_in = input_shape[0]
        w0 = widths[0]
        i_embed = 0
        layers.append(DenseSpec(zeros(w0, d_in), zeros(w0), residual_group=0, norm_kind=nk))
        trunk_owner = i_embed
        for b in range(blocks):
            entry = len(layers) - 1
            wa, wb = widths[1 + 2 * b], widths[2 + 2 * b]
            if norm:
                layers.append(_norm_layer("layer", w0, trunk_owner))
            i1 = len(layers)
            layers.append(DenseSpec(zeros(wa, w0), zeros(wa), None, nk))
            if norm:
                layers.append(_norm_layer("layer", wa, i1))
            layers.append(ActSpec("gelu"))
            i2 = len(layers)
            layers.append(DenseSpec(zeros(wb, wa), zeros(wb), 0, nk))
            layers.append(ResidualAddSpec(skip_from=entry))
            trunk_owner = i2
        if norm:
            layers.append(_norm_layer("layer", w0, trunk_owner))
        head = DenseSpec(zeros(num_classes, w0), zeros(num_classes))
        model = ModelSpec("mlp_like", layers, head, w0, num_classes, tuple(input_shape), blocks)
    validate_model(model)
    return model


def reference_teacher(
    family: str,
    width: int,
    blocks: int,
    num_classes: int,
    *,
    input_shape: tuple | None = None,
    seed: int = 0,
    norm: bool = True,
) -> ModelSpec:
    """Seeded reference network of uniform width.

    cnn_like: conv stem + ``blocks`` residual conv blocks (batch norm,
    relu) + global average pooling + linear head.
    mlp_like: dense embed + ``blocks`` pre-norm residual dense blocks
    (layer norm, gelu) + final layer norm + linear head.
    """
    if width < 4:
        raise ContractError(f"width must be >= 4, got {width}")
    if blocks < 1:
        raise ContractError(f"blocks must be >= 1, got {blocks}")
    if input_shape is None:
        input_shape = (3, 6, 6) if family == "cnn_like" else (24,)
    model = build_skeleton(
        family, [width] * (1 + 2 * blocks), blocks, num_classes, input_shape, norm=norm
    )
    base = RngStream(seed, STREAM_TEACHER_INIT)
    ordinal = 0
    for i, layer in model.weighted():
        rng = base.sub(ordinal)
        ordinal += 1
        fan_in = layer.in_dims * (layer.op_params if layer.kind == "conv" else 1)
        if family == "cnn_like":
            w = _he_init(rng, layer.weight.shape, fan_in)
        else:
            w = _glorot_init(rng, layer.weight.shape, fan_in, layer.out_rows)
        layer.weight.data[...] = w.astype(layer.weight.dtype)
        layer.bias.data[...] = (rng.normal(layer.bias.shape, scale=0.01)).astype(layer.bias.dtype)
    rng = base.sub(ordinal)
    model.head.weight.data[...] = rng.normal(model.head.weight.shape, scale=0.01).astype(
        model.head.weight.dtype
    )
    model.head.bias.data[...] = 0.0
    return model
