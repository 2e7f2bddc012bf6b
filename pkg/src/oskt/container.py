"""OSKC checkpoint container.

Layout: magic ``OSKC`` (4 bytes) | version u32 little-endian (= 1) |
manifest length u64 little-endian | manifest (UTF-8 JSON) | zero padding
to a 64-byte boundary | payload of raw little-endian tensor blobs, each
64-byte aligned, offsets relative to the payload start.

The manifest is deliberately human-diffable text: an ``entries`` list
(name, dtype "f32"|"f64", shape, offset, length) plus a free-form
``meta`` mapping.  Integer-valued data (labels, assignments, widths)
travels in ``meta`` as plain JSON numbers; the payload carries only
float tensors.  Containers round-trip bit-exactly, and unknown top-level
manifest keys survive a load/save cycle untouched.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .netgraph import ModelSpec, build_skeleton
from .numerics import Tensor

MAGIC = b"OSKC"
VERSION = 1
ALIGN = 64

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


@dataclass
class Container:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)  # unknown top-level manifest keys


def _pad(n: int) -> int:
    return (-n) % ALIGN


def save_container(path, tensors: dict, meta: dict | None = None, extra: dict | None = None) -> None:
    """Write tensors + metadata; identical inputs give identical bytes."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _NAMES:
            raise FormatError(
                f"tensor {name!r} has dtype {arr.dtype}, only float32/float64 payloads are supported"
            )
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": _NAMES[arr.dtype],
                "shape": list(arr.shape),
                "offset": offset,
                "length": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob) + _pad(len(blob))
    manifest = {"entries": entries, "meta": meta or {}}
    for key, value in (extra or {}).items():
        if key in ("entries", "meta"):
            raise FormatError(f"extra manifest key {key!r} collides with a reserved section")
        manifest[key] = value
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        fh.write(b"\0" * _pad(fh.tell()))
        for blob in blobs:
            fh.write(blob)
            fh.write(b"\0" * _pad(len(blob)))


def load_container(path) -> Container:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise FormatError(f"file too short for a container header ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}, expected {VERSION}")
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    if 16 + mlen > len(raw):
        raise FormatError(f"manifest length {mlen} exceeds the file")
    try:
        manifest = json.loads(raw[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"manifest is not valid JSON: {e}") from None
    if not isinstance(manifest, dict) or "entries" not in manifest:
        raise FormatError("manifest must be a mapping with an 'entries' list")
    payload_start = 16 + mlen + _pad(16 + mlen)
    payload = raw[payload_start:]

    tensors: dict[str, np.ndarray] = {}
    spans = []
    for entry in manifest["entries"]:
        try:
            name, dtype = entry["name"], entry["dtype"]
            shape, offset, length = entry["shape"], entry["offset"], entry["length"]
        except (TypeError, KeyError) as e:
            raise FormatError(f"manifest entry missing field: {e}") from None
        if dtype not in _DTYPES:
            raise FormatError(f"entry {name!r} has unsupported dtype {dtype!r}")
        dt = _DTYPES[dtype]
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if length != expected:
            raise FormatError(
                f"entry {name!r}: length {length} does not match shape {shape} ({expected} bytes)"
            )
        if offset % ALIGN:
            raise FormatError(f"entry {name!r}: offset {offset} is not {ALIGN}-byte aligned")
        if offset < 0 or offset + length > len(payload):
            raise FormatError(f"entry {name!r} spans past the end of the file")
        for other, (s, e) in spans:
            if offset < e and s < offset + length and length and e - s:
                raise FormatError(f"entries {other!r} and {name!r} overlap in the payload")
        spans.append((name, (offset, offset + length)))
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(shape, dtype=np.int64)),
                            offset=offset)
        tensors[name] = arr.reshape(shape).astype(dt.newbyteorder("="), copy=True)
    meta = manifest.get("meta", {})
    extra = {k: v for k, v in manifest.items() if k not in ("entries", "meta")}
    return Container(tensors=tensors, meta=meta, extra=extra)


# ---------------------------------------------------------------------------
# model adapter


def _model_tensors(model: ModelSpec, prefix: str = "") -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for i, layer in enumerate(model.layers):
        if layer.kind in ("conv", "dense"):
            out[f"{prefix}layer{i:03d}.weight"] = layer.weight.data
            out[f"{prefix}layer{i:03d}.bias"] = layer.bias.data
        elif layer.kind == "norm":
            out[f"{prefix}layer{i:03d}.gamma"] = layer.gamma.data
            out[f"{prefix}layer{i:03d}.beta"] = layer.beta.data
            if layer.norm_type == "batch":
                out[f"{prefix}layer{i:03d}.running_mean"] = layer.running_mean
                out[f"{prefix}layer{i:03d}.running_var"] = layer.running_var
    out[f"{prefix}head.weight"] = model.head.weight.data
    out[f"{prefix}head.bias"] = model.head.bias.data
    return out


def _model_meta(model: ModelSpec) -> dict:
    widths = [layer.out_rows for _, layer in model.weighted()]
    return {
        "family": model.family,
        "blocks": model.blocks,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "widths": widths,
        "norm": any(ly.kind == "norm" for ly in model.layers),
    }


def _restore_model(spec_meta: dict, tensors: dict, prefix: str = "") -> ModelSpec:
    try:
        model = build_skeleton(
            spec_meta["family"],
            [int(w) for w in spec_meta["widths"]],
            int(spec_meta["blocks"]),
            int(spec_meta["num_classes"]),
            tuple(spec_meta["input_shape"]),
            norm=bool(spec_meta.get("norm", True)),
        )
    except (KeyError, TypeError) as e:
        raise FormatError(f"model metadata incomplete: {e}") from None

    def take(name: str) -> np.ndarray:
        key = prefix + name
        if key not in tensors:
            raise FormatError(f"container is missing tensor {key!r}")
        return tensors[key]

    for i, layer in enumerate(model.layers):
        if layer.kind in ("conv", "dense"):
            layer.weight = Tensor._wrap(take(f"layer{i:03d}.weight"), True)
            layer.bias = Tensor._wrap(take(f"layer{i:03d}.bias"), True)
        elif layer.kind == "norm":
            layer.gamma = Tensor._wrap(take(f"layer{i:03d}.gamma"), True)
            layer.beta = Tensor._wrap(take(f"layer{i:03d}.beta"), True)
            if layer.norm_type == "batch":
                layer.running_mean = take(f"layer{i:03d}.running_mean")
                layer.running_var = take(f"layer{i:03d}.running_var")
    model.head.weight = Tensor._wrap(take("head.weight"), True)
    model.head.bias = Tensor._wrap(take("head.bias"), True)
    return model


def save_model(path, model: ModelSpec, meta: dict | None = None) -> None:
    full = {"kind": "model", "model": _model_meta(model)}
    full.update(meta or {})
    save_container(path, _model_tensors(model), full)


def load_model(path) -> tuple[ModelSpec, dict]:
    c = load_container(path)
    if c.meta.get("kind") != "model":
        raise FormatError(f"expected a model container, found kind {c.meta.get('kind')!r}")
    return _restore_model(c.meta.get("model", {}), c.tensors), c.meta


# ---------------------------------------------------------------------------
# chain adapter (the refined teacher rides along: expansion needs its
# norms and head, and nothing else records them)


def save_chain(path, chain, teacher: ModelSpec, meta: dict | None = None) -> None:
    tensors = _model_tensors(teacher, prefix="teacher.")
    for i in sorted(chain.rows):
        tensors[f"chain.layer{i:03d}.rows"] = chain.rows[i].data
        tensors[f"chain.layer{i:03d}.bias"] = chain.bias[i].data
    units = [
        {
            "members": [int(m) for m in unit.members],
            "assignment": [int(a) for a in unit.assignment],
        }
        for unit in chain.partition.units
    ]
    full = {
        "kind": "chain",
        "model": _model_meta(teacher),
        "partition": {"metric": chain.partition.metric, "units": units},
    }
    full.update(meta or {})
    save_container(path, tensors, full)


def load_chain(path):
    """Returns (chain, teacher)."""
    from .partition import PartitionUnit, RowPartition
    from .weightchain import WeightChain

    c = load_container(path)
    if c.meta.get("kind") != "chain":
        raise FormatError(f"expected a chain container, found kind {c.meta.get('kind')!r}")
    teacher = _restore_model(c.meta.get("model", {}), c.tensors, prefix="teacher.")
    pmeta = c.meta.get("partition", {})
    units, unit_of = [], {}
    for u, udesc in enumerate(pmeta.get("units", [])):
        assignment = np.asarray(udesc["assignment"], dtype=np.int64)
        members = tuple(int(m) for m in udesc["members"])
        sizes = np.bincount(assignment, minlength=int(assignment.max()) + 1 if assignment.size else 0)
        units.append(PartitionUnit(members=members, assignment=assignment, sizes=sizes))
        for m in members:
            unit_of[m] = u
    partition = RowPartition(
        metric=pmeta.get("metric", "euclidean"), units=units, centers={}, unit_of=unit_of
    )
    rows, bias = {}, {}
    for i in sorted(unit_of):
        key = f"chain.layer{i:03d}"
        if f"{key}.rows" not in c.tensors or f"{key}.bias" not in c.tensors:
            raise FormatError(f"container is missing chain tensors for layer {i}")
        rows[i] = Tensor._wrap(c.tensors[f"{key}.rows"], True)
        bias[i] = Tensor._wrap(c.tensors[f"{key}.bias"], True)
    norm_refs = {
        i: layer for i, layer in enumerate(teacher.layers) if layer.kind == "norm"
    }
    chain = WeightChain(
        family=teacher.family,
        partition=partition,
        rows=rows,
        bias=bias,
        norm_refs=norm_refs,
    )
    return chain, teacher


# ---------------------------------------------------------------------------
# dataset adapter


def save_dataset(path, ds) -> None:
    tensors = {"prototypes": ds.prototypes.astype(np.float64)}
    splits_meta = {}
    for name in ("train", "query", "gallery"):
        split = getattr(ds, name)
        tensors[f"{name}.x"] = split.x
        splits_meta[name] = {
            "ids": [int(i) for i in split.ids],
            "views": [int(v) for v in split.views],
        }
    meta = {
        "kind": "dataset",
        "splits": splits_meta,
        "params": {
            "num_ids": ds.num_ids,
            "views": ds.views,
            "dims": list(ds.dims),
            "noise_scale": ds.noise_scale,
            "seed": ds.seed,
        },
    }
    save_container(path, tensors, meta)


def load_dataset(path):
    from .benchdata import Split, ToyReIDDataset

    c = load_container(path)
    if c.meta.get("kind") != "dataset":
        raise FormatError(f"expected a dataset container, found kind {c.meta.get('kind')!r}")
    splits = {}
    for name in ("train", "query", "gallery"):
        try:
            sm = c.meta["splits"][name]
            x = c.tensors[f"{name}.x"]
        except KeyError as e:
            raise FormatError(f"dataset container is missing split data: {e}") from None
        splits[name] = Split(
            x=x,
            ids=np.asarray(sm["ids"], dtype=np.int64),
            views=np.asarray(sm["views"], dtype=np.int64),
        )
    p = c.meta.get("params", {})
    return ToyReIDDataset(
        train=splits["train"],
        query=splits["query"],
        gallery=splits["gallery"],
        num_ids=int(p.get("num_ids", 0)),
        views=int(p.get("views", 0)),
        dims=tuple(p.get("dims", splits["train"].x.shape[1:])),
        noise_scale=float(p.get("noise_scale", 0.0)),
        seed=int(p.get("seed", 0)),
        prototypes=c.tensors.get("prototypes", np.zeros((0, 0))),
    )
