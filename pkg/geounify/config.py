"""
Pipeline configuration (config.yaml)

Order of precedence for every value:
  1) explicit CLI flag (--seed, --k, --out, ...)
  2) environment (GEOUNIFY_CONFIG picks the file, GEOUNIFY_THREADS caps workers)
  3) the YAML file
  4) DEFAULTS below

The merged dict becomes a frozen PipelineConfig that is validated once and
snapshotted next to every output.
"""

from __future__ import annotations
import copy
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import yaml

from .errors import ConfigError


def project_root() -> Path:
    return Path(__file__).resolve().parents[1]


ROOT = project_root()
CFG_PATH = ROOT / "config.yaml"

DEFAULTS: Dict[str, Any] = {
    "seed": 42,
    "paths": {"data": "data/fixture", "out": "runs/default"},
    "fixture": {
        "world_size_tiles": 64,
        "tile_size_px": 96,
        "meters_per_pixel": 1.0,
        "queries_per_tile": 4,
        "semi_positive_overlap": 0.5,
        "noise_level": 0.05,
        "ground_height": 32,
        "ground_width": 128,
        "adversarial": False,
        "decoy_fraction": 1.0,
    },
    "model": {
        "level_channels": [32, 16, 8],
        "level0_size": 12,
        "encoder_channels": [8, 16, 32],
        "head_stride": 1,
        "projector_reduce": 4,
        "deconv_kernel": 2,
        "aggregator": "attention_gem",
        "gem_p": 3.0,
        "tau_init": 0.1,
    },
    "loss": {
        "alpha": 100.0,
        "beta": 10.0,
        "gamma": 1.0,
        "sigma_px": None,  # None -> L/96 * 4
        "label_smoothing": 0.1,
        "shared_tau": True,
    },
    "train": {
        "mode": "joint",
        "epochs": 20,
        "batch_size": 16,
        "learning_rate": 0.01,
        "momentum": 0.9,
        "schedule": "cosine",
        "checkpoint_every": 0,
        "max_grad_norm": 5.0,
    },
    "retrieval": {"k": 5, "rerank": True, "recall_ks": [1, 5, 10]},
    "eval": {"thresholds_m": [1.0, 10.0]},
    "runtime": {"threads": 0},
}

# Full-scale shapes; only used for shape contracts, never trained at desk scale.
PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "full": {
        "fixture": {"tile_size_px": 384, "ground_height": 128, "ground_width": 512},
        "model": {
            "level_channels": [768, 384, 192, 96],
            "level0_size": 12,
            "encoder_channels": [48, 96, 192, 384],
            "head_stride": 2,
        },
    },
    # smallest consistent shapes, for smoke tests and the composite gradient check
    "tiny": {
        "fixture": {"world_size_tiles": 4, "tile_size_px": 32, "queries_per_tile": 2,
                    "ground_height": 16, "ground_width": 32},
        "model": {"level_channels": [8, 8, 8], "level0_size": 4, "encoder_channels": [8, 8, 8],
                  "projector_reduce": 2},
        "train": {"batch_size": 4, "epochs": 1},
        "retrieval": {"k": 3},
    },
}

TRAIN_MODES = ("joint", "global_only", "detail_only")
AGGREGATORS = ("attention_gem", "avg")


# ================= data model =================
@dataclass(frozen=True)
class FixtureConfig:
    world_size_tiles: int
    tile_size_px: int
    meters_per_pixel: float
    queries_per_tile: int
    semi_positive_overlap: float
    noise_level: float
    ground_height: int
    ground_width: int
    adversarial: bool
    decoy_fraction: float


@dataclass(frozen=True)
class ModelConfig:
    level_channels: Tuple[int, ...]
    level0_size: int
    encoder_channels: Tuple[int, ...]
    head_stride: int
    projector_reduce: int
    deconv_kernel: int
    aggregator: str
    gem_p: float
    tau_init: float

    @property
    def n_levels(self) -> int:
        return len(self.level_channels)

    def level_size(self, level: int) -> int:
        return self.level0_size * 2 ** level


@dataclass(frozen=True)
class LossConfig:
    alpha: float
    beta: float
    gamma: float
    sigma_px: Optional[float]
    label_smoothing: float
    shared_tau: bool


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    epochs: int
    batch_size: int
    learning_rate: float
    momentum: float
    schedule: str
    checkpoint_every: int
    max_grad_norm: float


@dataclass(frozen=True)
class RetrievalConfig:
    k: int
    rerank: bool
    recall_ks: Tuple[int, ...]


@dataclass(frozen=True)
class EvalConfig:
    thresholds_m: Tuple[float, ...]


@dataclass(frozen=True)
class RuntimeConfig:
    threads: int


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    paths: Dict[str, str]
    fixture: FixtureConfig
    model: ModelConfig
    loss: LossConfig
    train: TrainConfig
    retrieval: RetrievalConfig
    eval: EvalConfig
    runtime: RuntimeConfig
    source: Optional[str] = field(default=None, compare=False)

    @property
    def tile_size(self) -> int:
        return self.fixture.tile_size_px

    @property
    def sigma_px(self) -> float:
        s = self.loss.sigma_px
        return float(s) if s is not None else self.tile_size / 96.0 * 4.0

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d.pop("source", None)
        return _plain(d)

    def replace(self, overrides: Mapping[str, Any]) -> "PipelineConfig":
        return from_dict(_apply_overrides(self.to_dict(), overrides), source=self.source)

    def workers(self) -> int:
        return resolve_threads(self.runtime.threads)


# ================= helpers =================
def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def deep_merge(base: dict, extra: Optional[Mapping]) -> dict:
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _apply_overrides(d: dict, overrides: Optional[Mapping[str, Any]]) -> dict:
    """Dotted keys: {"retrieval.k": 3, "seed": 7}."""
    out = copy.deepcopy(d)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section '{p}' in override '{key}'")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key '{key}'")
        node[parts[-1]] = val
    return out


def resolve_config_path(explicit: Optional[str] = None) -> Optional[Path]:
    if explicit:
        return Path(explicit)
    env = os.getenv("GEOUNIFY_CONFIG")
    if env:
        return Path(env)
    return CFG_PATH if CFG_PATH.exists() else None


def resolve_threads(configured: int) -> int:
    n = int(configured) if configured and int(configured) > 0 else (os.cpu_count() or 1)
    env = os.getenv("GEOUNIFY_THREADS")
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            raise ConfigError(f"GEOUNIFY_THREADS must be an integer, got {env!r}") from None
    return max(1, n)


def load_yaml(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return data


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
                preset: Optional[str] = None) -> PipelineConfig:
    merged = copy.deepcopy(DEFAULTS)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}' (have {sorted(PRESETS)})")
        merged = deep_merge(merged, PRESETS[preset])
    cfg_path = resolve_config_path(path)
    if cfg_path is not None:
        merged = deep_merge(merged, load_yaml(cfg_path))
    merged = _apply_overrides(merged, overrides)
    return from_dict(merged, source=str(cfg_path) if cfg_path else None)


def preset_config(name: str, overrides: Optional[Mapping[str, Any]] = None) -> PipelineConfig:
    """DEFAULTS plus one preset; no config file or environment involved."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}' (have {sorted(PRESETS)})")
    return from_dict(_apply_overrides(deep_merge(DEFAULTS, PRESETS[name]), overrides))


def from_dict(d: Mapping[str, Any], source: Optional[str] = None) -> PipelineConfig:
    d = deep_merge(DEFAULTS, d)
    unknown = set(d) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    for sec, defaults in DEFAULTS.items():
        if isinstance(defaults, dict) and sec != "paths":
            extra = set(d[sec]) - set(defaults)
            if extra:
                raise ConfigError(f"unknown key(s) in '{sec}': {sorted(extra)}")
    try:
        m = dict(d["model"])
        m["level_channels"] = tuple(int(c) for c in m["level_channels"])
        m["encoder_channels"] = tuple(int(c) for c in m["encoder_channels"])
        r = dict(d["retrieval"])
        r["recall_ks"] = tuple(int(k) for k in r["recall_ks"])
        cfg = PipelineConfig(
            seed=int(d["seed"]),
            paths={k: str(v) for k, v in d["paths"].items()},
            fixture=FixtureConfig(**d["fixture"]),
            model=ModelConfig(**m),
            loss=LossConfig(**d["loss"]),
            train=TrainConfig(**d["train"]),
            retrieval=RetrievalConfig(**r),
            eval=EvalConfig(thresholds_m=tuple(float(t) for t in d["eval"]["thresholds_m"])),
            runtime=RuntimeConfig(**d["runtime"]),
            source=source,
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config: {e}") from None
    validate(cfg)
    return cfg


def _require(ok: bool, key: str, msg: str) -> None:
    if not ok:
        raise ConfigError(f"{key}: {msg}")


def validate(cfg: PipelineConfig) -> None:
    fx, m, lo, tr, rt = cfg.fixture, cfg.model, cfg.loss, cfg.train, cfg.retrieval
    side = int(round(fx.world_size_tiles ** 0.5))
    _require(side * side == fx.world_size_tiles and side >= 1, "fixture.world_size_tiles",
             "must be a perfect square")
    _require(fx.meters_per_pixel > 0, "fixture.meters_per_pixel", "must be > 0")
    _require(fx.queries_per_tile >= 1, "fixture.queries_per_tile", "must be >= 1")
    _require(0.0 <= fx.semi_positive_overlap < 1.0, "fixture.semi_positive_overlap", "must be in [0, 1)")
    _require(fx.noise_level >= 0, "fixture.noise_level", "must be >= 0")
    _require(0.0 <= fx.decoy_fraction <= 1.0, "fixture.decoy_fraction", "must be in [0, 1]")

    _require(m.n_levels >= 1, "model.level_channels", "needs at least one level")
    _require(all(c >= 1 for c in m.level_channels), "model.level_channels", "channels must be >= 1")
    _require(m.head_stride in (1, 2), "model.head_stride", "must be 1 or 2")
    _require(m.deconv_kernel in (2, 4), "model.deconv_kernel", "must be 2 or 4")
    _require(m.aggregator in AGGREGATORS, "model.aggregator", f"must be one of {AGGREGATORS}")
    _require(0.5 <= m.gem_p <= 10.0, "model.gem_p", "must be in [0.5, 10]")
    _require(m.tau_init > 0, "model.tau_init", "must be > 0")
    _require(m.projector_reduce >= 1, "model.projector_reduce", "must be >= 1")
    L = fx.tile_size_px
    down = 2 ** len(m.encoder_channels) * m.head_stride
    _require(L % down == 0 and L // down == m.level0_size, "model.level0_size",
             f"tile {L}px through {len(m.encoder_channels)} stride-2 stages and head stride "
             f"{m.head_stride} gives {L / down:g}, not {m.level0_size}")
    finest = m.level_size(m.n_levels - 1)
    _require(L % finest == 0, "model.level_channels",
             f"finest level {finest} must divide the tile size {L}")
    for lvl in range(1, m.n_levels):
        size = m.level_size(lvl)
        stage = _stage_for_size(L, size, len(m.encoder_channels))
        _require(stage is not None, "model.level_channels",
                 f"level {lvl} ({size}x{size}) has no encoder stage at that resolution")
        _require(m.encoder_channels[stage] == m.level_channels[lvl], "model.level_channels",
                 f"level {lvl} wants {m.level_channels[lvl]} channels but encoder stage {stage + 1} "
                 f"has {m.encoder_channels[stage]}")
    gdown = 2 ** len(m.encoder_channels) * m.head_stride
    _require(fx.ground_height % gdown == 0 and fx.ground_width % gdown == 0, "fixture.ground_height",
             f"ground panorama must be divisible by {gdown}")

    _require(all(w >= 0 for w in (lo.alpha, lo.beta, lo.gamma)), "loss", "weights must be >= 0")
    _require(lo.sigma_px is None or lo.sigma_px > 0, "loss.sigma_px", "must be > 0")
    _require(0.0 <= lo.label_smoothing < 1.0, "loss.label_smoothing", "must be in [0, 1)")

    _require(tr.mode in TRAIN_MODES, "train.mode", f"must be one of {TRAIN_MODES}")
    _require(tr.epochs >= 0, "train.epochs", "must be >= 0")
    _require(tr.batch_size >= 1, "train.batch_size", "must be >= 1")
    _require(tr.learning_rate > 0, "train.learning_rate", "must be > 0")
    _require(0.0 <= tr.momentum < 1.0, "train.momentum", "must be in [0, 1)")
    _require(tr.schedule in ("cosine", "constant"), "train.schedule", "must be cosine or constant")
    _require(tr.checkpoint_every >= 0, "train.checkpoint_every", "must be >= 0")
    _require(tr.max_grad_norm >= 0, "train.max_grad_norm", "must be >= 0 (0 disables clipping)")

    _require(rt.k >= 1, "retrieval.k", "must be >= 1")
    _require(all(k >= 1 for k in rt.recall_ks), "retrieval.recall_ks", "must be >= 1")
    _require(len(cfg.eval.thresholds_m) >= 1 and all(t > 0 for t in cfg.eval.thresholds_m),
             "eval.thresholds_m", "must be positive")


def _stage_for_size(L: int, size: int, n_stages: int) -> Optional[int]:
    for s in range(n_stages):
        if L // 2 ** (s + 1) == size:
            return s
    return None


def stage_for_level(cfg: PipelineConfig, level: int) -> int:
    stage = _stage_for_size(cfg.tile_size, cfg.model.level_size(level), len(cfg.model.encoder_channels))
    if stage is None:
        raise ConfigError(f"level {level} has no encoder stage")
    return stage


def write_snapshot(cfg: PipelineConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    p = out_dir / "config.snapshot.yaml"
    with open(p, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
    return p
