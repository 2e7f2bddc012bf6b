"""Synthetic identity-retrieval benchmark.

Each identity is a random prototype vector; each view is a fixed affine
distortion of the input space; samples are views of prototypes plus
isotropic noise.  One view's held-out samples form the query split, its
remaining samples join the train split (so every camera is seen during
training), and the other views are divided disjointly into gallery and
train.  This mirrors the cross-view retrieval setting the pipeline
targets, but small enough that a full experiment runs on one CPU core in
seconds.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .netgraph import ModelSpec, forward
from .numerics import RngStream, Tensor
from .numerics import dtype as _dtype
from .numerics.rng import STREAM_DATASET


def worker_count() -> int:
    """Worker threads for the parallel-safe paths (OSKT_THREADS, default 1)."""
    raw = os.environ.get("OSKT_THREADS", "1").strip()
    try:
        n = int(raw)
    except ValueError:
        raise ContractError(f"OSKT_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Split:
    x: np.ndarray  # (n, *dims)
    ids: np.ndarray  # (n,) int
    views: np.ndarray  # (n,) int

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class ToyReIDDataset:
    train: Split
    query: Split
    gallery: Split
    num_ids: int
    views: int
    dims: tuple
    noise_scale: float
    seed: int
    prototypes: np.ndarray  # (num_ids, D) in flattened space


def generate(
    num_ids: int,
    views: int,
    samples_per_id_view: int,
    dims: tuple,
    noise_scale: float,
    seed: int = 0,
    *,
    view_scale: float = 0.1,
    gallery_fraction: float = 0.5,
    query_view: int = 0,
    warp_seed: int | None = None,
) -> ToyReIDDataset:
    """Build the benchmark; deterministic in (seed, parameters).

    Every query identity is guaranteed to appear in the gallery under a
    view label different from the query view.  ``warp_seed`` fixes the
    per-view distortions independently of the identity draw (default:
    tied to ``seed``), so two datasets can share cameras while showing
    disjoint identities -- the usual retrieval transfer setting.
    """
    if num_ids < 2:
        raise ContractError(f"need at least 2 identities, got {num_ids}")
    if views < 2:
        raise ContractError(f"need at least 2 views, got {views}")
    if samples_per_id_view < 1:
        raise ContractError("need at least 1 sample per identity and view")
    if not 0 <= query_view < views:
        raise ContractError(f"query view {query_view} out of range")
    if not 0.0 < gallery_fraction <= 1.0:
        raise ContractError("gallery_fraction must be in (0, 1]")
    dims = tuple(int(d) for d in dims)
    d_flat = int(np.prod(dims))
    dt = _dtype()
    rng = RngStream(seed, STREAM_DATASET)
    warp_rng = rng if warp_seed is None else RngStream(warp_seed, STREAM_DATASET)

    # Identity information is carried in per-channel levels (the prototype
    # is a channel vector broadcast over positions); each view is a fixed
    # channel colour mix plus an additive field.  Both are affine, and —
    # unlike a dense distortion of the full input space — their inverse is
    # identity-independent and within reach of small conv or dense trunks,
    # so invariance learned on one identity set carries to a fresh one.
    c = dims[0]
    spatial = d_flat // c
    proto_levels = rng.sub(0).normal((num_ids, c))
    protos = np.repeat(proto_levels, spatial, axis=1)
    warps = []
    for v in range(views):
        r = warp_rng.sub(1 + v)
        mix = np.eye(c) + view_scale * r.normal((c, c)) / np.sqrt(c)
        shift = view_scale * r.normal(d_flat)
        warps.append((mix, shift))

    def _warp(v: int, p: np.ndarray) -> np.ndarray:
        mix, shift = warps[v]
        return (mix @ p.reshape(c, spatial)).reshape(d_flat) + shift

    per_split: dict[str, list] = {"train": [], "query": [], "gallery": []}
    n_gallery = max(1, int(round(gallery_fraction * samples_per_id_view)))
    if n_gallery >= samples_per_id_view and gallery_fraction < 1.0:
        n_gallery = max(1, samples_per_id_view - 1)
    for i in range(num_ids):
        for v in range(views):
            r = rng.sub(1000 + i * views + v)
            base = _warp(v, protos[i])
            noise = r.normal((samples_per_id_view, d_flat), scale=noise_scale)
            samples = base[None, :] + noise
            if v == query_view:
                # Hold out the probe samples; the remainder joins the train
                # split so every camera is represented at training time.
                targets = ["query"] * n_gallery + ["train"] * (samples_per_id_view - n_gallery)
            else:
                targets = ["gallery"] * n_gallery + ["train"] * (samples_per_id_view - n_gallery)
            for s, target in zip(samples, targets):
                per_split[target].append((s, i, v))

    def pack(rows: list) -> Split:
        if not rows:
            return Split(
                x=np.zeros((0, *dims), dtype=dt),
                ids=np.zeros(0, dtype=np.int64),
                views=np.zeros(0, dtype=np.int64),
            )
        xs = np.stack([r[0] for r in rows]).reshape(-1, *dims).astype(dt)
        return Split(
            x=xs,
            ids=np.array([r[1] for r in rows], dtype=np.int64),
            views=np.array([r[2] for r in rows], dtype=np.int64),
        )

    ds = ToyReIDDataset(
        train=pack(per_split["train"]),
        query=pack(per_split["query"]),
        gallery=pack(per_split["gallery"]),
        num_ids=num_ids,
        views=views,
        dims=dims,
        noise_scale=noise_scale,
        seed=seed,
        prototypes=protos,
    )
    for qid in np.unique(ds.query.ids):
        mask = (ds.gallery.ids == qid) & (ds.gallery.views != query_view)
        if not mask.any():
            raise ContractError(f"identity {qid} has no cross-view gallery sample")
    return ds


# ---------------------------------------------------------------------------
# PK batch sampling


class PKSampler:
    """Yields batches of P identities x K instances from the train split.

    Per epoch, every identity's samples are shuffled and chopped into
    K-sized chunks; batches then draw P chunks of distinct identities, so
    a full epoch touches every train sample at most once.  Identical
    (seed, epoch) pairs reproduce the exact batch sequence.
    """

    def __init__(self, split: Split, p: int, k: int, rng: RngStream | int):
        if p < 2 or k < 2:
            raise ContractError(f"PK sampling needs P >= 2 and K >= 2, got P={p}, K={k}")
        self.split = split
        self.p = p
        self.k = k
        self._rng = rng if isinstance(rng, RngStream) else RngStream(rng, 0)
        ids, counts = np.unique(split.ids, return_counts=True)
        usable = ids[counts >= k]
        if usable.size < p:
            raise ContractError(
                f"need at least {p} identities with >= {k} train samples, have {usable.size}"
            )
        self._by_id = {int(i): np.flatnonzero(split.ids == i) for i in usable}

    def epoch(self, epoch_idx: int):
        """Deterministic batch iterator for one epoch."""
        rng = self._rng.sub(epoch_idx)
        chunks: dict[int, list[np.ndarray]] = {}
        for ordinal, (ident, idx) in enumerate(sorted(self._by_id.items())):
            perm = idx[rng.sub(ordinal).permutation(idx.size)]
            usable = (idx.size // self.k) * self.k
            chunks[ident] = [
                perm[s : s + self.k] for s in range(0, usable, self.k)
            ]
        order = sorted(chunks)
        pick_rng = rng.sub(len(self._by_id))
        step = 0
        while True:
            available = [i for i in order if chunks[i]]
            if len(available) < self.p:
                return
            sel = pick_rng.sub(step).choice(len(available), size=self.p, replace=False)
            step += 1
            batch_idx = np.concatenate([chunks[available[s]].pop() for s in sorted(sel)])
            yield self.split.x[batch_idx], self.split.ids[batch_idx]

    def stream(self):
        """Endless batch stream: epoch 0, 1, 2, ..."""
        e = 0
        while True:
            yielded = False
            for batch in self.epoch(e):
                yielded = True
                yield batch
            if not yielded:  # pragma: no cover - constructor guarantees one batch
                raise ContractError("PK sampler produced an empty epoch")
            e += 1


def pk_sample(dataset: ToyReIDDataset, p: int, k: int, seed: int = 0):
    """First PK batch of epoch 0 (convenience wrapper around PKSampler)."""
    sampler = PKSampler(dataset.train, p, k, RngStream(seed, 0))
    return next(sampler.epoch(0))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    mAP: float
    cmc: dict[int, float]
    per_query_ap: np.ndarray
    skipped_queries: int

    def summary(self) -> str:
        ranks = ", ".join(f"rank-{k}: {v:.4f}" for k, v in sorted(self.cmc.items()))
        return f"mAP: {self.mAP:.4f} | {ranks} | skipped: {self.skipped_queries}"


def _embed(model, split: Split, batch_size: int = 64) -> np.ndarray:
    outs = []
    for s in range(0, len(split), batch_size):
        x = Tensor(split.x[s : s + batch_size])
        outs.append(model_forward(model, x).features.data.astype(np.float64))
    return np.concatenate(outs, axis=0)


def model_forward(model, x: Tensor):
    """Eval forward for either a ModelSpec or a view object with .forward."""
    if isinstance(model, ModelSpec):
        return forward(model, x, mode="eval")
    return model.forward(x, mode="eval")


def _query_ap(args):
    sims, valid, rel, ks = args
    order = np.argsort(-sims[valid], kind="stable")
    ranked_rel = rel[valid][order]
    hits = np.flatnonzero(ranked_rel)
    if hits.size == 0:
        return None
    precision_at_hit = (np.arange(hits.size) + 1.0) / (hits + 1.0)
    ap = float(precision_at_hit.mean())
    cmc = {k: 1.0 if (hits < k).any() else 0.0 for k in ks}
    return ap, cmc


def evaluate(
    model,
    query: Split,
    gallery: Split,
    *,
    ks: tuple[int, ...] = (1, 5, 10),
    batch_size: int = 64,
) -> EvalReport:
    """Cosine-ranked retrieval metrics.

    Embeddings are L2-normalized; gallery entries sharing the query's
    identity *and* view are excluded from that query's ranking; queries
    left without any positive are skipped (counted in the report).
    AP is the mean of precision-at-hit over a query's positives; rank-k
    is the fraction of queries with a positive in the top k.
    """
    if len(query) == 0 or len(gallery) == 0:
        raise ContractError("evaluate needs non-empty query and gallery splits")
    qf = _embed(model, query, batch_size)
    gf = _embed(model, gallery, batch_size)

    def normalize(f):
        norms = np.linalg.norm(f, axis=1, keepdims=True)
        return np.divide(f, norms, out=np.zeros_like(f), where=norms > 0)

    sims = normalize(qf) @ normalize(gf).T
    same_id = query.ids[:, None] == gallery.ids[None, :]
    same_view = query.views[:, None] == gallery.views[None, :]
    valid = ~(same_id & same_view)

    jobs = [(sims[q], valid[q], same_id[q], ks) for q in range(len(query))]
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_query_ap, jobs))
    else:
        results = [_query_ap(j) for j in jobs]

    aps, cmc_acc = [], {k: 0.0 for k in ks}
    skipped = 0
    for r in results:
        if r is None:
            skipped += 1
            continue
        ap, cmc = r
        aps.append(ap)
        for k in ks:
            cmc_acc[k] += cmc[k]
    if skipped:
        warnings.warn(f"{skipped} queries had no valid positive and were skipped", RuntimeWarning)
    if not aps:
        raise ContractError("no query had a valid positive in the gallery")
    n = len(aps)
    return EvalReport(
        mAP=float(np.mean(aps)),
        cmc={k: cmc_acc[k] / n for k in ks},
        per_query_ap=np.array(aps),
        skipped_queries=skipped,
    )
