"""The weight chain: refined cluster-center rows, trained jointly with
the teacher.

``init_chain`` copies partition centers into independent parameters (one
row stack and bias vector per weighted layer).  Normalization parameters
are *not* copied: the chain holds references to the teacher's own gamma
and beta tensors, so teacher updates are immediately visible to every
derived student during refinement.

``build_s_student`` materializes the chain-width student as a live view:
its weighted-layer parameters are differentiable functions of the chain
rows (input columns summed per predecessor cluster) and its norm affine
pairs are differentiable per-cluster means of the teacher's, so one
backward pass reaches the teacher, the chain, and the student head.

``refine`` runs the joint objective

    total = L_T + L_S + alpha * L_ref

where L_T and L_S are identity + batch-hard-triplet losses of teacher
and S-Student and L_ref anchors teacher rows to their chain rows
(mean squared deviation per layer, averaged over layers).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .benchdata import PKSampler, ToyReIDDataset
from .errors import ContractError, NumericError
from .netgraph import (
    DenseSpec,
    ForwardOutput,
    ModelSpec,
    NormSpec,
    feature_owner,
    forward,
    id_loss,
    input_owner_map,
    parameters,
    triplet_hard_loss,
)
from .numerics import RngStream, Tape, Tensor, ops
from .numerics.rng import STREAM_FINETUNE, STREAM_SAMPLER
from .optim import DEFAULT_LR, Adam
from .partition import RowPartition


@dataclass
class RefineHyper:
    n_iter: int = 500
    lr: float = DEFAULT_LR
    margin: float = 0.3
    batch_p: int = 4
    batch_k: int = 4
    alpha_mode: str = "fixed"  # "fixed" | "progressive"
    alpha_value: float = 1.0


@dataclass
class WeightChain:
    family: str
    partition: RowPartition
    rows: dict[int, Tensor]  # layer idx -> (M_l, N_{l-1}, O_l)
    bias: dict[int, Tensor]  # layer idx -> (M_l,)
    norm_refs: dict[int, NormSpec]  # norm layer idx -> the teacher's NormSpec

    def parameters(self) -> list[Tensor]:
        out = []
        for i in sorted(self.rows):
            out.extend([self.rows[i], self.bias[i]])
        return out

    def width_of(self, layer_idx: int) -> int:
        return self.rows[layer_idx].shape[0]


def init_chain(teacher: ModelSpec, partition: RowPartition) -> WeightChain:
    """Seed chain rows from partition centers; share the teacher's norms."""
    rows: dict[int, Tensor] = {}
    bias: dict[int, Tensor] = {}
    for i in partition.layer_indices():
        centers = partition.centers[i]
        rows[i] = Tensor(centers.weights, requires_grad=True)
        bias[i] = Tensor(centers.bias, requires_grad=True)
    norm_refs = {
        i: layer for i, layer in enumerate(teacher.layers) if layer.kind == "norm"
    }
    return WeightChain(
        family=teacher.family,
        partition=partition,
        rows=rows,
        bias=bias,
        norm_refs=norm_refs,
    )


# ---------------------------------------------------------------------------
# S-Student: the chain-width student as a differentiable view


def _group_indicator(assignment: np.ndarray, m: int, mean: bool = False) -> np.ndarray:
    """(m, N) matrix with g[j, t] = 1 (or 1/n_j) iff row t sits in cluster j."""
    n = assignment.shape[0]
    g = np.zeros((m, n))
    g[assignment, np.arange(n)] = 1.0
    if mean:
        g /= g.sum(axis=1, keepdims=True)
    return g


class SStudentView:
    """Chain-width student whose parameters are derived, per forward pass,
    from the chain rows and the teacher's shared norm parameters.

    Only the classifier head is an independent parameter (initialized by
    summing teacher head columns per cluster, then trained on its own).
    Batch-norm running statistics start as per-cluster means of the
    teacher's and are tracked independently from then on.
    """

    def __init__(self, chain: WeightChain, teacher: ModelSpec):
        self.chain = chain
        self.teacher = teacher
        self.family = teacher.family
        self.input_shape = teacher.input_shape
        self.num_classes = teacher.num_classes
        self._owners = input_owner_map(teacher)
        self._feature_owner = feature_owner(teacher)
        part = chain.partition

        # fixed mixing matrices: per weighted layer, sum over predecessor clusters
        self._col_mix: dict[int, np.ndarray | None] = {}
        for i in part.layer_indices():
            owner = self._owners[i]
            if owner is None:
                self._col_mix[i] = None
            else:
                self._col_mix[i] = _group_indicator(
                    part.assignment(owner), part.n_clusters(owner)
                )
        # per norm layer: averaging matrix over the governed partition
        self._norm_mix: dict[int, np.ndarray] = {}
        self._running: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for i, norm in chain.norm_refs.items():
            mix = _group_indicator(
                part.assignment(norm.for_layer), part.n_clusters(norm.for_layer), mean=True
            )
            self._norm_mix[i] = mix
            if norm.norm_type == "batch":
                self._running[i] = (
                    (mix @ norm.running_mean).astype(norm.running_mean.dtype),
                    (mix @ norm.running_var).astype(norm.running_var.dtype),
                )

        fo_mix = _group_indicator(
            part.assignment(self._feature_owner), part.n_clusters(self._feature_owner)
        )
        head_w = teacher.head.weight.data @ fo_mix.T
        self.head = DenseSpec(
            weight=Tensor(head_w, requires_grad=True),
            bias=Tensor(teacher.head.bias.data.copy(), requires_grad=True),
        )

    def parameters(self) -> list[Tensor]:
        """Independent parameters owned by the view (the head only);
        everything else belongs to the chain or the teacher."""
        return [self.head.weight, self.head.bias]

    def forward(self, batch, mode: str = "eval", update_running: bool | None = None) -> ForwardOutput:
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == "train"
        if update_running is None:
            update_running = training
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        chain = self.chain
        outputs: list[Tensor] = []
        h = x
        for i, layer in enumerate(self.teacher.layers):
            if layer.kind in ("conv", "dense"):
                rows = chain.rows[i]
                mix = self._col_mix[i]
                w = rows if mix is None else ops.mix_middle(rows, mix)
                b = chain.bias[i]
                if layer.kind == "conv":
                    m, c_in = w.shape[0], w.shape[1]
                    k = layer.kernel_size
                    w4 = ops.reshape(w, (m, c_in, k, k))
                    h = ops.conv2d(h, w4, layer.stride, layer.pad)
                    h = ops.add_channel_bias(h, b)
                else:
                    w2 = ops.reshape(w, (w.shape[0], w.shape[1]))
                    h = ops.linear(h, w2, b)
            elif layer.kind == "norm":
                gamma = ops.fixed_linear(self._norm_mix[i], layer.gamma)
                beta = ops.fixed_linear(self._norm_mix[i], layer.beta)
                if layer.norm_type == "batch":
                    rm, rv = self._running[i]
                    h = ops.batch_norm(
                        h, gamma, beta, rm, rv, layer.momentum, layer.eps,
                        training=training, update_running=update_running,
                    )
                else:
                    h = ops.layer_norm(h, gamma, beta, layer.eps)
            elif layer.kind == "activation":
                h = ops.relu(h) if layer.act == "relu" else ops.gelu(h)
            elif layer.kind == "residual_add":
                skip = x if layer.skip_from < 0 else outputs[layer.skip_from]
                h = ops.add(h, skip)
            outputs.append(h)
        features = ops.global_avg_pool(h) if self.family == "cnn_like" else h
        logits = ops.linear(features, self.head.weight, self.head.bias)
        return ForwardOutput(features=features, logits=logits)


def build_s_student(chain: WeightChain, teacher: ModelSpec) -> SStudentView:
    return SStudentView(chain, teacher)


# ---------------------------------------------------------------------------
# refinement objective


def refine_loss(teacher: ModelSpec, chain: WeightChain) -> Tensor:
    """Mean squared deviation of teacher rows from their chain rows.

    Per layer: (1/M_l) * sum over rows of |row - chain_row(cluster)|^2,
    bias coordinate included; averaged over the clustered layers.
    Gradients flow into both the teacher rows and the chain rows.
    """
    layer_indices = chain.partition.layer_indices()
    if not layer_indices:
        raise ContractError("chain has no clustered layers")
    total: Tensor | None = None
    for i in layer_indices:
        assignment = chain.partition.assignment(i)
        m = chain.partition.n_clusters(i)
        layer = teacher.layers[i]
        # taped reshape (not rows_view) so gradients land on the weight itself
        t_rows = ops.reshape(layer.weight, (layer.out_rows, layer.in_dims, layer.op_params))
        gathered = ops.gather_rows(chain.rows[i], assignment)
        term = ops.tsum(ops.square(ops.sub(t_rows, gathered)))
        b_gathered = ops.gather_rows(
            ops.reshape(chain.bias[i], (m, 1)), assignment
        )
        t_bias = ops.reshape(teacher.layers[i].bias, (assignment.shape[0], 1))
        term = ops.add(term, ops.tsum(ops.square(ops.sub(t_bias, b_gathered))))
        term = ops.scale(term, 1.0 / m)
        total = term if total is None else ops.add(total, term)
    return ops.scale(total, 1.0 / len(layer_indices))


def alpha(iteration: int, n_iter: int, mode: str = "fixed", value: float = 1.0) -> float:
    """Refinement-anchor weight: fixed, or ramping iteration/n_iter."""
    if mode == "fixed":
        return float(value)
    if mode == "progressive":
        if n_iter <= 0:
            return 0.0
        return float(iteration) / float(n_iter)
    raise ContractError(f"alpha mode must be 'fixed' or 'progressive', got {mode!r}")


@dataclass
class RefineResult:
    trace: list[tuple] = field(default_factory=list)  # (iter, L_T, L_S, L_ref, alpha, total)
    student: SStudentView | None = None

    TRACE_COLUMNS = ("iteration", "loss_teacher", "loss_student", "loss_ref", "alpha", "loss_total")


def refine(
    teacher: ModelSpec,
    chain: WeightChain,
    dataset: ToyReIDDataset,
    hyper: RefineHyper,
    seed: int = 0,
) -> RefineResult:
    """Joint progressive refinement of teacher and chain.

    One optimizer step per iteration updates the teacher (including the
    shared norms), the chain rows/biases, and both classifier heads.
    """
    if hyper.n_iter < 0:
        raise ContractError(f"n_iter must be >= 0, got {hyper.n_iter}")
    student = build_s_student(chain, teacher)
    result = RefineResult(student=student)
    if hyper.n_iter == 0:
        return result

    params = parameters(teacher) + chain.parameters() + student.parameters()
    opt = Adam(params, lr=hyper.lr)
    sampler = PKSampler(
        dataset.train, hyper.batch_p, hyper.batch_k, RngStream(seed, STREAM_SAMPLER)
    )
    batches = sampler.stream()
    for it in range(hyper.n_iter):
        x, labels = next(batches)
        a = alpha(it, hyper.n_iter, hyper.alpha_mode, hyper.alpha_value)
        with Tape() as tape:
            t_out = forward(teacher, x, mode="train")
            l_t = ops.add(
                id_loss(t_out.logits, labels),
                triplet_hard_loss(t_out.features, labels, hyper.margin),
            )
            s_out = student.forward(x, mode="train")
            l_s = ops.add(
                id_loss(s_out.logits, labels),
                triplet_hard_loss(s_out.features, labels, hyper.margin),
            )
            l_ref = refine_loss(teacher, chain)
            total = ops.add(ops.add(l_t, l_s), ops.scale(l_ref, a))
        values = (float(l_t.data), float(l_s.data), float(l_ref.data), a, float(total.data))
        if not all(np.isfinite(v) for v in values):
            raise NumericError(f"non-finite loss at refine iteration {it}: {values}")
        grads = tape.backward(total)
        opt.step(grads)
        result.trace.append((it, *values))
    return result


@dataclass
class TrainResult:
    trace: list[tuple] = field(default_factory=list)  # (epoch, mean_loss)
    epochs: int = 0


def fit_reid(
    model,
    dataset: ToyReIDDataset,
    *,
    epochs: int,
    lr: float = DEFAULT_LR,
    margin: float = 0.3,
    batch_p: int = 4,
    batch_k: int = 4,
    seed: int = 0,
    extra_params: list | None = None,
) -> TrainResult:
    """Train a single network (identity + batch-hard triplet) on the
    train split for a fixed number of PK epochs."""
    if epochs < 0:
        raise ContractError(f"epochs must be >= 0, got {epochs}")
    result = TrainResult(epochs=epochs)
    if epochs == 0:
        return result
    if isinstance(model, ModelSpec):
        params = parameters(model)
        run = lambda x: forward(model, x, mode="train")
    else:  # a view object exposing .forward / .parameters
        params = list(model.parameters())
        run = lambda x: model.forward(x, mode="train")
    if extra_params:
        params = params + list(extra_params)
    opt = Adam(params, lr=lr)
    sampler = PKSampler(dataset.train, batch_p, batch_k, RngStream(seed, STREAM_FINETUNE))
    for epoch in range(epochs):
        losses = []
        for x, labels in sampler.epoch(epoch):
            with Tape() as tape:
                out = run(x)
                loss = ops.add(
                    id_loss(out.logits, labels),
                    triplet_hard_loss(out.features, labels, margin),
                )
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss in epoch {epoch}")
            grads = tape.backward(loss)
            opt.step(grads)
            losses.append(value)
        result.trace.append((epoch, float(np.mean(losses))))
    return result
