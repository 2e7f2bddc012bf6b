"""Command-line pipeline driver.

Verbs: train-teacher, refine, expand, finetune, eval, compare, schedule,
inspect.  Every run validates its config up front, writes the resolved
config next to its outputs, and is byte-for-byte reproducible for a
fixed config, seed, and kernel backend.  Exit codes: 0 success, 2
configuration/contract error, 3 numeric failure, 4 container format
error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import benchdata, config as config_mod, container, expansion, weightchain
from .errors import ConfigError, ContractError, FormatError, NumericError
from .netgraph import ModelSpec, reference_teacher
from .numerics import RngStream, set_precision
from .numerics.rng import STREAM_HEAD_INIT
from .partition import cluster_model


def _load_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.validate(
        config_mod.ExperimentConfig()
    )
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.precision is not None:
        cfg.precision = args.precision
    config_mod.validate(cfg)
    set_precision(cfg.precision)
    return cfg


def _prepare_out(cfg: config_mod.ExperimentConfig) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "resolved_config.json"), "w") as fh:
        fh.write(cfg.to_json())
    return cfg.out_dir


def _dataset(
    cfg: config_mod.ExperimentConfig, seed: int, warp_seed: int | None = None
) -> benchdata.ToyReIDDataset:
    d = cfg.dataset
    return benchdata.generate(
        num_ids=d.num_ids,
        views=d.views,
        samples_per_id_view=d.samples_per_id_view,
        dims=tuple(d.dims),
        noise_scale=d.noise_scale,
        seed=seed,
        view_scale=d.view_scale,
        gallery_fraction=d.gallery_fraction,
        warp_seed=warp_seed,
    )


def _downstream(cfg: config_mod.ExperimentConfig, seed: int) -> benchdata.ToyReIDDataset:
    """New identities; same cameras unless the config severs them too."""
    warp = seed if cfg.downstream_shared_cameras else None
    return _dataset(cfg, seed + cfg.downstream_seed_offset, warp_seed=warp)


def _write_report(path: str, report: benchdata.EvalReport) -> None:
    with open(path, "w") as fh:
        fh.write(report.summary() + "\n")


def _reset_head(model: ModelSpec, seed: int) -> None:
    rng = RngStream(seed, STREAM_HEAD_INIT)
    w = rng.normal(model.head.weight.shape, scale=0.01)
    model.head.weight.data[...] = w.astype(model.head.weight.dtype)
    model.head.bias.data[...] = 0.0


def _hyper(cfg: config_mod.ExperimentConfig) -> weightchain.RefineHyper:
    return weightchain.RefineHyper(
        n_iter=cfg.refine.n_iter,
        lr=cfg.refine.lr,
        margin=cfg.refine.margin,
        batch_p=cfg.refine.batch_p,
        batch_k=cfg.refine.batch_k,
        alpha_mode=cfg.alpha.mode,
        alpha_value=cfg.alpha.value,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_train_teacher(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    ds = _dataset(cfg, cfg.seed)
    teacher = reference_teacher(
        cfg.family,
        width=cfg.teacher_width,
        blocks=cfg.teacher_blocks,
        num_classes=cfg.dataset.num_ids,
        input_shape=tuple(cfg.dataset.dims),
        seed=cfg.seed,
    )
    t0 = time.time()
    weightchain.fit_reid(
        teacher, ds,
        epochs=cfg.train.epochs, lr=cfg.train.lr, margin=cfg.train.margin,
        batch_p=cfg.train.batch_p, batch_k=cfg.train.batch_k, seed=cfg.seed,
    )
    report = benchdata.evaluate(teacher, ds.query, ds.gallery)
    path = os.path.join(out, "teacher.oskc")
    container.save_model(path, teacher, {"seed": cfg.seed, "epochs": cfg.train.epochs})
    _write_report(os.path.join(out, "teacher_eval.txt"), report)
    print(f"teacher: {report.summary()}")
    print(f"trained {cfg.train.epochs} epochs in {time.time() - t0:.1f}s -> {path}")
    return 0


def cmd_refine(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    teacher, _ = container.load_model(args.teacher)
    ds = _dataset(cfg, cfg.seed)
    part = cluster_model(
        teacher, cfg.resolved_chain_width(), metric=cfg.metric, seed=cfg.seed
    )
    chain = weightchain.init_chain(teacher, part)
    t0 = time.time()
    result = weightchain.refine(teacher, chain, ds, _hyper(cfg), seed=cfg.seed)
    path = os.path.join(out, "chain.oskc")
    container.save_chain(path, chain, teacher, {"seed": cfg.seed})
    trace_path = os.path.join(out, "refine_trace.csv")
    with open(trace_path, "w") as fh:
        fh.write(",".join(weightchain.RefineResult.TRACE_COLUMNS) + "\n")
        for row in result.trace:
            fh.write(",".join(f"{v}" for v in row) + "\n")
    print(f"refined {len(result.trace)} iterations in {time.time() - t0:.1f}s -> {path}")
    return 0


def _parse_widths(args, teacher_width: int, chain_width: int) -> list[int]:
    if args.widths:
        try:
            widths = [int(w) for w in args.widths.split(",")]
        except ValueError:
            raise ConfigError(f"--widths must be comma-separated ints, got {args.widths!r}")
    elif args.ratio is not None:
        widths = [max(chain_width, int(round(args.ratio * teacher_width)))]
    else:
        raise ConfigError("expand needs --widths or --ratio")
    return widths


def cmd_expand(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    chain, teacher = container.load_chain(args.chain)
    trunk = chain.width_of(sorted(chain.rows)[0])
    widths = _parse_widths(args, teacher.embedding_dim, trunk)
    from .numerics.tape import stats

    for w in widths:
        r0, b0 = stats.records, stats.backward_calls
        t0 = time.time()
        matcher = expansion.build_matcher(chain.partition, w)
        student = expansion.expand(chain, teacher, matcher)
        elapsed = time.time() - t0
        if stats.records != r0 or stats.backward_calls != b0:
            raise NumericError("expansion performed gradient work; it must be computation-free")
        counts = {
            str(um.members[0]): [int(c) for c in um.counts] for um in matcher.units
        }
        path = os.path.join(out, f"student_w{w}.oskc")
        container.save_model(path, student, {"expanded_from": trunk, "width": w,
                                             "matcher_counts": counts})
        print(f"expanded width {w} in {elapsed * 1e3:.1f} ms -> {path}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    student, meta = container.load_model(args.student)
    ds = _downstream(cfg, cfg.seed)
    if cfg.finetune.epochs > 0:
        _reset_head(student, cfg.seed)
        weightchain.fit_reid(
            student, ds,
            epochs=cfg.finetune.epochs, lr=cfg.finetune.lr, margin=cfg.finetune.margin,
            batch_p=cfg.finetune.batch_p, batch_k=cfg.finetune.batch_k, seed=cfg.seed,
        )
    report = benchdata.evaluate(student, ds.query, ds.gallery)
    width = meta.get("width", student.embedding_dim)
    path = os.path.join(out, f"tuned_w{width}.oskc")
    container.save_model(path, student, {"width": width, "seed": cfg.seed,
                                         "finetune_epochs": cfg.finetune.epochs})
    _write_report(os.path.join(out, f"finetune_eval_w{width}.txt"), report)
    print(f"finetuned width {width}: {report.summary()}")
    print(f"-> {path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    model, _ = container.load_model(args.model)
    ds = _downstream(cfg, cfg.seed) if args.downstream else _dataset(cfg, cfg.seed)
    report = benchdata.evaluate(model, ds.query, ds.gallery)
    _write_report(os.path.join(out, "eval.txt"), report)
    print(report.summary())
    return 0


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    chain_widths = cfg.resolved_chain_widths()
    rows = []  # (width, method, seed, mAP, rank1)
    for seed in cfg.seeds:
        src = _dataset(cfg, seed)
        teacher = reference_teacher(
            cfg.family, width=cfg.teacher_width, blocks=cfg.teacher_blocks,
            num_classes=cfg.dataset.num_ids, input_shape=tuple(cfg.dataset.dims), seed=seed,
        )
        weightchain.fit_reid(
            teacher, src,
            epochs=cfg.train.epochs, lr=cfg.train.lr, margin=cfg.train.margin,
            batch_p=cfg.train.batch_p, batch_k=cfg.train.batch_k, seed=seed,
        )
        # One chain per configured width, refined narrowest first against
        # the shared teacher: every refinement continues the teacher's own
        # training, so wider chains distill a progressively stronger anchor.
        chains = {}
        for cw in chain_widths:
            part = cluster_model(teacher, cw, metric=cfg.metric, seed=seed)
            chain = weightchain.init_chain(teacher, part)
            weightchain.refine(teacher, chain, src, _hyper(cfg), seed=seed)
            chains[cw] = chain
        for width in cfg.student_widths:
            # Expand from the widest chain that fits the target width.
            cw = max(c for c in chain_widths if c <= width)
            chain = chains[cw]
            student = expansion.expand(chain, teacher,
                                       expansion.build_matcher(chain.partition, width))
            weightchain.fit_reid(
                student, src,
                epochs=cfg.finetune.epochs, lr=cfg.finetune.lr, margin=cfg.finetune.margin,
                batch_p=cfg.finetune.batch_p, batch_k=cfg.finetune.batch_k,
                seed=seed + width,
            )
            rep = benchdata.evaluate(student, src.query, src.gallery)
            rows.append((width, "oskt", seed, rep.mAP, rep.cmc[1]))
            print(f"width {width} seed {seed} oskt:    mAP {rep.mAP:.4f} rank1 {rep.cmc[1]:.4f}")

            scratch = reference_teacher(
                cfg.family, width=width, blocks=cfg.teacher_blocks,
                num_classes=cfg.dataset.num_ids, input_shape=tuple(cfg.dataset.dims),
                seed=seed + 7919,
            )
            weightchain.fit_reid(
                scratch, src,
                epochs=cfg.finetune.epochs, lr=cfg.finetune.lr, margin=cfg.finetune.margin,
                batch_p=cfg.finetune.batch_p, batch_k=cfg.finetune.batch_k,
                seed=seed + 7919,
            )
            rep = benchdata.evaluate(scratch, src.query, src.gallery)
            rows.append((width, "scratch", seed, rep.mAP, rep.cmc[1]))
            print(f"width {width} seed {seed} scratch: mAP {rep.mAP:.4f} rank1 {rep.cmc[1]:.4f}")
    table = os.path.join(out, "compare.csv")
    with open(table, "w") as fh:
        fh.write("width,method,seed,mAP,rank1\n")
        for w, method, seed, m, r1 in rows:
            fh.write(f"{w},{method},{seed},{m},{r1}\n")
    with open(os.path.join(out, "plot_data.csv"), "w") as fh:
        fh.write("width,method,seed,mAP\n")
        for w, method, seed, m, _ in rows:
            fh.write(f"{w},{method},{seed},{m}\n")
    print(f"-> {table}")
    return 0


def cmd_schedule(args) -> int:
    widths = expansion.chain_width_schedule(args.a, args.b, args.s)
    print(",".join(str(w) for w in widths))
    return 0


def cmd_inspect(args) -> int:
    c = container.load_container(args.path)
    kind = c.meta.get("kind", "unknown")
    print(f"container kind: {kind}")
    print(f"tensors ({len(c.tensors)}):")
    for name in sorted(c.tensors):
        arr = c.tensors[name]
        print(f"  {name}  {arr.dtype}  {tuple(arr.shape)}")
    meta_keys = [k for k in sorted(c.meta) if k != "kind"]
    if meta_keys:
        print(f"meta keys: {', '.join(meta_keys)}")
    if c.extra:
        print(f"extra manifest keys: {', '.join(sorted(c.extra))}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config (defaults used when omitted)")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="override config output directory")
    p.add_argument("--precision", choices=("single", "double"), default=None,
                   help="float32 (default) or float64 storage")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oskt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train the full-width teacher")
    _add_common(p)
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("refine", help="cluster rows and jointly refine the weight chain")
    p.add_argument("--teacher", required=True, help="teacher container path")
    _add_common(p)
    p.set_defaults(fn=cmd_refine)

    p = sub.add_parser("expand", help="expand the chain into student networks")
    p.add_argument("--chain", required=True, help="chain container path")
    p.add_argument("--widths", help="comma-separated student widths")
    p.add_argument("--ratio", type=float, help="single width as a fraction of teacher width")
    _add_common(p)
    p.set_defaults(fn=cmd_expand)

    p = sub.add_parser("finetune", help="finetune a student on the downstream dataset")
    p.add_argument("--student", required=True, help="student container path")
    _add_common(p)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a model container on the benchmark")
    p.add_argument("--model", required=True, help="model container path")
    p.add_argument("--downstream", action="store_true",
                   help="use the downstream (shifted-seed) dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("compare", help="expanded-then-finetuned vs scratch, per width and seed")
    _add_common(p)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("schedule", help="geometric chain-width ladder")
    p.add_argument("a", type=int, help="smallest chain width")
    p.add_argument("b", type=int, help="full (teacher) width")
    p.add_argument("s", type=int, help="number of chains")
    p.set_defaults(fn=cmd_schedule)

    p = sub.add_parser("inspect", help="describe a container file")
    p.add_argument("path", help="container path")
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return 4
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
