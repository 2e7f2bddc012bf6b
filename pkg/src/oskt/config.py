"""Experiment configuration: one JSON object, strictly validated before
any compute, and written back (fully resolved) next to every run's
outputs so results are reproducible from the artifact alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .errors import ConfigError

_FAMILIES = ("cnn_like", "mlp_like")
_METRICS = ("euclidean", "cosine")
_ALPHA_MODES = ("fixed", "progressive")
_PRECISIONS = ("single", "double")


@dataclass
class DatasetConfig:
    num_ids: int = 48
    views: int = 3
    samples_per_id_view: int = 4
    dims: list = field(default_factory=lambda: [8, 4, 4])
    noise_scale: float = 1.0
    view_scale: float = 1.0
    gallery_fraction: float = 0.5


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 2e-3
    margin: float = 0.3
    batch_p: int = 4
    batch_k: int = 3


@dataclass
class RefineConfig:
    n_iter: int = 500
    lr: float = 3.5e-4
    margin: float = 0.3
    batch_p: int = 4
    batch_k: int = 3


@dataclass
class AlphaConfig:
    mode: str = "fixed"
    value: float = 1.0


@dataclass
class ExperimentConfig:
    family: str = "cnn_like"
    teacher_width: int = 32
    teacher_blocks: int = 2
    chain_width: int | None = 8
    chain_ratio: float | None = None
    chain_widths: list | None = None  # width-sweep comparisons: one chain per entry
    student_widths: list = field(default_factory=lambda: [8, 16, 24, 32])
    metric: str | None = None
    alpha: AlphaConfig = field(default_factory=AlphaConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, lr=5e-4))
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    downstream_seed_offset: int = 1000
    downstream_shared_cameras: bool = True
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    out_dir: str = "runs"
    precision: str = "single"

    def resolved_chain_width(self) -> int:
        if self.chain_width is not None:
            return int(self.chain_width)
        return max(1, int(round(self.chain_ratio * self.teacher_width)))

    def resolved_chain_widths(self) -> list:
        """Chain widths for the width-sweep comparison (ascending)."""
        if self.chain_widths is not None:
            return [int(w) for w in self.chain_widths]
        return [self.resolved_chain_width()]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _build_section(cls, data: dict, path: str):
    known = {f: t for f, t in cls.__dataclass_fields__.items()}
    unknown = set(data) - set(known)
    _check(not unknown, f"unknown key(s) {sorted(unknown)} in {path}")
    return cls(**data)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Full schema/range validation; returns its argument on success."""
    _check(cfg.family in _FAMILIES, f"family must be one of {_FAMILIES}, got {cfg.family!r}")
    _check(isinstance(cfg.teacher_width, int) and cfg.teacher_width >= 4,
           f"teacher_width must be an int >= 4, got {cfg.teacher_width!r}")
    _check(isinstance(cfg.teacher_blocks, int) and cfg.teacher_blocks >= 1,
           f"teacher_blocks must be an int >= 1, got {cfg.teacher_blocks!r}")
    _check((cfg.chain_width is None) != (cfg.chain_ratio is None),
           "exactly one of chain_width / chain_ratio must be set")
    if cfg.chain_width is not None:
        _check(isinstance(cfg.chain_width, int) and 1 <= cfg.chain_width <= cfg.teacher_width,
               f"chain_width must be an int in [1, {cfg.teacher_width}], got {cfg.chain_width!r}")
    else:
        _check(isinstance(cfg.chain_ratio, (int, float)) and 0.0 < cfg.chain_ratio <= 1.0,
               f"chain_ratio must be in (0, 1], got {cfg.chain_ratio!r}")
    m = cfg.resolved_chain_width()
    _check(isinstance(cfg.student_widths, list) and cfg.student_widths,
           "student_widths must be a non-empty list")
    for w in cfg.student_widths:
        _check(isinstance(w, int) and m <= w <= cfg.teacher_width,
               f"student width {w!r} must be an int in [{m}, {cfg.teacher_width}]")
    if cfg.chain_widths is not None:
        cw = cfg.chain_widths
        _check(isinstance(cw, list) and cw, "chain_widths must be a non-empty list or null")
        for c in cw:
            _check(isinstance(c, int) and 1 <= c <= cfg.teacher_width,
                   f"chain width {c!r} must be an int in [1, {cfg.teacher_width}]")
        _check(all(a < b for a, b in zip(cw, cw[1:])),
               f"chain_widths must be strictly ascending, got {cw!r}")
        _check(min(cw) <= min(cfg.student_widths),
               "smallest chain width must not exceed the smallest student width")
    _check(cfg.metric is None or cfg.metric in _METRICS,
           f"metric must be one of {_METRICS} or null, got {cfg.metric!r}")
    _check(cfg.alpha.mode in _ALPHA_MODES,
           f"alpha.mode must be one of {_ALPHA_MODES}, got {cfg.alpha.mode!r}")
    _check(isinstance(cfg.alpha.value, (int, float)) and cfg.alpha.value >= 0,
           f"alpha.value must be a number >= 0, got {cfg.alpha.value!r}")
    for name, sec in (("train", cfg.train), ("refine", cfg.refine), ("finetune", cfg.finetune)):
        it = sec.epochs if isinstance(sec, TrainConfig) else sec.n_iter
        label = "epochs" if isinstance(sec, TrainConfig) else "n_iter"
        _check(isinstance(it, int) and it >= 0, f"{name}.{label} must be an int >= 0, got {it!r}")
        _check(sec.lr > 0, f"{name}.lr must be positive, got {sec.lr!r}")
        _check(sec.margin >= 0, f"{name}.margin must be >= 0, got {sec.margin!r}")
        _check(isinstance(sec.batch_p, int) and sec.batch_p >= 2,
               f"{name}.batch_p must be an int >= 2, got {sec.batch_p!r}")
        _check(isinstance(sec.batch_k, int) and sec.batch_k >= 2,
               f"{name}.batch_k must be an int >= 2, got {sec.batch_k!r}")
    d = cfg.dataset
    _check(isinstance(d.num_ids, int) and d.num_ids >= 2, "dataset.num_ids must be an int >= 2")
    _check(isinstance(d.views, int) and d.views >= 2, "dataset.views must be an int >= 2")
    _check(isinstance(d.samples_per_id_view, int) and d.samples_per_id_view >= 1,
           "dataset.samples_per_id_view must be an int >= 1")
    _check(isinstance(d.dims, list) and d.dims and all(isinstance(x, int) and x > 0 for x in d.dims),
           f"dataset.dims must be a list of positive ints, got {d.dims!r}")
    if cfg.family == "cnn_like":
        _check(len(d.dims) == 3, "cnn_like needs 3-D dataset dims (channels, height, width)")
    else:
        _check(len(d.dims) == 1, "mlp_like needs 1-D dataset dims")
    _check(d.noise_scale >= 0, "dataset.noise_scale must be >= 0")
    _check(d.view_scale >= 0, "dataset.view_scale must be >= 0")
    _check(0.0 < d.gallery_fraction <= 1.0, "dataset.gallery_fraction must be in (0, 1]")
    _check(isinstance(cfg.downstream_seed_offset, int),
           "downstream_seed_offset must be an int")
    _check(isinstance(cfg.downstream_shared_cameras, bool),
           "downstream_shared_cameras must be a boolean")
    _check(isinstance(cfg.seed, int), f"seed must be an int, got {cfg.seed!r}")
    _check(isinstance(cfg.seeds, list) and cfg.seeds and all(isinstance(s, int) for s in cfg.seeds),
           f"seeds must be a non-empty list of ints, got {cfg.seeds!r}")
    _check(isinstance(cfg.out_dir, str) and cfg.out_dir, "out_dir must be a non-empty string")
    _check(cfg.precision in _PRECISIONS,
           f"precision must be one of {_PRECISIONS}, got {cfg.precision!r}")
    return cfg


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config must be a JSON object, got {type(data).__name__}")
    sections = {
        "alpha": AlphaConfig,
        "train": TrainConfig,
        "refine": RefineConfig,
        "finetune": TrainConfig,
        "dataset": DatasetConfig,
    }
    top = dict(data)
    kwargs = {}
    for key, cls in sections.items():
        if key in top:
            raw = top.pop(key)
            _check(isinstance(raw, dict), f"{key} must be a JSON object, got {raw!r}")
            try:
                kwargs[key] = _build_section(cls, raw, key)
            except TypeError as e:
                raise ConfigError(f"bad {key} section: {e}") from None
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(top) - known
    _check(not unknown, f"unknown config key(s): {sorted(unknown)}")
    try:
        cfg = ExperimentConfig(**top, **kwargs)
    except TypeError as e:
        raise ConfigError(f"bad config: {e}") from None
    return validate(cfg)


def load(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    return from_dict(data)
