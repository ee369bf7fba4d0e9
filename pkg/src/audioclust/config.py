"""Run configuration: schema, validation, and deterministic seed fan-out.

Configs load from TOML or JSON (by extension). Unknown keys are rejected
with the offending field path, and a single global ``seed`` fans out to
per-component seeds by hashing the component name, so one integer pins the
whole run; any per-component seed can still be set explicitly.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .frontend import FrontendConfig, SpecAugmentPolicy
from .model import EncoderConfig, HeadConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


SEED_COMPONENTS = ("model", "clustering", "sampler", "augment", "eval")


def derive_seed(master: int, component: str) -> int:
    digest = hashlib.sha256(f"{master}:{component}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


@dataclass
class DataConfig:
    target_rate: int = 16000
    duration: float = 10.0
    cache_dir: str = ""
    root: str = ""


@dataclass
class AugmentConfig:
    num_freq_masks: int = 2
    max_freq_width: int = 8
    num_time_masks: int = 2
    max_time_width: Optional[int] = None  # None -> 10% of the frame count
    mask_value: Optional[float] = None  # None -> per-spectrogram mean


@dataclass
class ModelConfig:
    conv_blocks: list = field(
        default_factory=lambda: [[32, 3, 2], [64, 3, 2], [128, 3, 2], [256, 3, 2]]
    )
    embedding_dim: int = 1280
    projection_width: int = 512
    standardize_input: bool = True


@dataclass
class PicConfig:
    top_m: int = 10
    epsilon: float = 1e-11
    max_iter: int = 5000
    epsilon_loop: float = 1e-8


@dataclass
class PretrainSection:
    algorithm: str = "kmeans"
    num_clusters: int = 256
    lr: float = 0.05
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    pca_dim: int = 128
    momentum: float = 0.9
    weight_decay: float = 1e-5
    kmeans_max_iter: int = 100


@dataclass
class EvalSection:
    mode: str = "frozen"
    init: str = "pretrained"
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 50


@dataclass
class SeedsConfig:
    model: Optional[int] = None
    clustering: Optional[int] = None
    sampler: Optional[int] = None
    augment: Optional[int] = None
    eval: Optional[int] = None


@dataclass
class FrontendSection:
    win_ms: float = 25.0
    hop_ms: float = 10.0
    mel_bins: int = 64
    fmin: float = 60.0
    fmax: float = 7800.0
    floor: float = 1e-10


@dataclass
class RunConfig:
    run_name: str = "run"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    frontend: FrontendSection = field(default_factory=FrontendSection)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    pic: PicConfig = field(default_factory=PicConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    seeds: SeedsConfig = field(default_factory=SeedsConfig)

    def seed_for(self, component: str) -> int:
        explicit = getattr(self.seeds, component, None)
        if explicit is not None:
            return explicit
        return derive_seed(self.seed, component)

    def resolved(self) -> dict:
        out = asdict(self)
        out["seeds"] = {c: self.seed_for(c) for c in SEED_COMPONENTS}
        return out

    def frontend_config(self) -> FrontendConfig:
        f = self.frontend
        return FrontendConfig(
            sample_rate=self.data.target_rate,
            win_ms=f.win_ms,
            hop_ms=f.hop_ms,
            mel_bins=f.mel_bins,
            fmin=f.fmin,
            fmax=f.fmax,
            floor=f.floor,
        )

    def augment_policy(self, seed: int = 0) -> SpecAugmentPolicy:
        a = self.augment
        return SpecAugmentPolicy(
            num_freq_masks=a.num_freq_masks,
            max_freq_width=a.max_freq_width,
            num_time_masks=a.num_time_masks,
            max_time_width=a.max_time_width,
            mask_value=a.mask_value,
            seed=seed,
        )

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            conv_blocks=tuple(tuple(b) for b in self.model.conv_blocks),
            embedding_dim=self.model.embedding_dim,
        )

    def head_config(self) -> HeadConfig:
        return HeadConfig(
            projection_width=self.model.projection_width,
            num_clusters=self.pretrain.num_clusters,
        )

    def hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(path or "<root>", f"expected a table, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    kwargs = {name: raw[name] for name in known if name in raw}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path or "<root>", str(exc)) from exc


_SECTIONS = {
    "data": DataConfig,
    "frontend": FrontendSection,
    "augment": AugmentConfig,
    "model": ModelConfig,
    "pretrain": PretrainSection,
    "pic": PicConfig,
    "eval": EvalSection,
    "seeds": SeedsConfig,
}


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a table")
    unknown = set(raw) - set(_SECTIONS) - {"run_name", "seed"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    cfg = RunConfig(
        run_name=raw.get("run_name", "run"),
        seed=raw.get("seed", 0),
        **{
            name: _build(cls, raw[name], name)
            for name, cls in _SECTIONS.items()
            if name in raw
        },
    )
    validate(cfg)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if path.suffix == ".json":
        raw = json.loads(path.read_text())
    else:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    return config_from_dict(raw)


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def validate(cfg: RunConfig) -> None:
    _require(cfg.data.target_rate > 0, "data.target_rate", "must be > 0")
    _require(cfg.data.duration > 0, "data.duration", "must be > 0")
    _require(cfg.frontend.win_ms > 0, "frontend.win_ms", "must be > 0")
    _require(cfg.frontend.hop_ms > 0, "frontend.hop_ms", "must be > 0")
    _require(cfg.frontend.mel_bins > 0, "frontend.mel_bins", "must be > 0")
    _require(
        0 <= cfg.frontend.fmin < cfg.frontend.fmax,
        "frontend.fmax",
        "need 0 <= fmin < fmax",
    )
    _require(
        cfg.frontend.fmax <= cfg.data.target_rate / 2,
        "frontend.fmax",
        "must not exceed the Nyquist frequency",
    )
    _require(cfg.frontend.floor > 0, "frontend.floor", "must be > 0")
    _require(cfg.augment.num_freq_masks >= 0, "augment.num_freq_masks", "must be >= 0")
    _require(cfg.augment.num_time_masks >= 0, "augment.num_time_masks", "must be >= 0")
    _require(cfg.augment.max_freq_width >= 0, "augment.max_freq_width", "must be >= 0")
    _require(
        cfg.augment.max_freq_width <= cfg.frontend.mel_bins,
        "augment.max_freq_width",
        "must not exceed frontend.mel_bins",
    )
    _require(cfg.model.embedding_dim > 0, "model.embedding_dim", "must be > 0")
    _require(cfg.model.projection_width > 0, "model.projection_width", "must be > 0")
    _require(len(cfg.model.conv_blocks) >= 1, "model.conv_blocks", "need at least one block")
    for i, block in enumerate(cfg.model.conv_blocks):
        _require(
            isinstance(block, (list, tuple)) and len(block) == 3,
            f"model.conv_blocks[{i}]",
            "expected [out_channels, kernel, stride]",
        )
    _require(
        cfg.pretrain.algorithm in ("kmeans", "pic"),
        "pretrain.algorithm",
        "must be 'kmeans' or 'pic'",
    )
    _require(cfg.pretrain.num_clusters >= 2, "pretrain.num_clusters", "must be >= 2")
    _require(cfg.pretrain.lr > 0, "pretrain.lr", "must be > 0")
    _require(cfg.pretrain.batch_size >= 1, "pretrain.batch_size", "must be >= 1")
    _require(cfg.pretrain.max_epochs >= 1, "pretrain.max_epochs", "must be >= 1")
    _require(
        1 <= cfg.pretrain.patience <= cfg.pretrain.max_epochs,
        "pretrain.patience",
        "need 1 <= patience <= max_epochs",
    )
    _require(cfg.pretrain.pca_dim >= 1, "pretrain.pca_dim", "must be >= 1")
    _require(cfg.pretrain.momentum >= 0, "pretrain.momentum", "must be >= 0")
    _require(cfg.pretrain.weight_decay >= 0, "pretrain.weight_decay", "must be >= 0")
    _require(cfg.pic.top_m >= 1, "pic.top_m", "must be >= 1")
    _require(cfg.pic.epsilon > 0, "pic.epsilon", "must be > 0")
    _require(cfg.pic.max_iter >= 1, "pic.max_iter", "must be >= 1")
    _require(cfg.eval.mode in ("frozen", "finetune"), "eval.mode", "must be 'frozen' or 'finetune'")
    _require(
        cfg.eval.init in ("pretrained", "random"),
        "eval.init",
        "must be 'pretrained' or 'random'",
    )
    _require(cfg.eval.lr > 0, "eval.lr", "must be > 0")
    _require(cfg.eval.batch_size >= 1, "eval.batch_size", "must be >= 1")
    _require(cfg.eval.max_epochs >= 1, "eval.max_epochs", "must be >= 1")


def write_resolved(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved.json"
    path.write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")
    return path
