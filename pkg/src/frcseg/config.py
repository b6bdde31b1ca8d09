"""Training configuration: dataclasses, YAML round-trip, profiles, hashing.

Defaults are desk scale (64 px images, small channel counts, CPU friendly).
``paper_config()`` returns the full-scale profile (512 px, lr 5e-4, weight
decay 1e-4, 90 epochs, batch 10, granularities 16/24/32) as a named profile
rather than the default.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .backbone import BackboneConfig
from .errors import ConfigError
from .frequency import FemConfig
from .losses import LossWeights
from .region import RegionConfig

FINETUNE_POLICIES = ("auto", "all", "selective")
DATA_LAYOUTS = ("synth", "generic", "kvasir", "isic")


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= beta < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {beta}")


@dataclass
class DataConfig:
    layout: str = "synth"
    root: str | None = None
    ratio: float = 0.1
    test_fraction: float = 0.2
    synth_n: int = 64
    synth_size: int = 64

    def validate(self) -> None:
        if self.layout not in DATA_LAYOUTS:
            raise ConfigError(f"unknown layout '{self.layout}', expected one of {DATA_LAYOUTS}")
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"labeled ratio must be in (0, 1], got {self.ratio}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in [0, 1), got {self.test_fraction}")
        if self.synth_n < 1:
            raise ConfigError(f"synth_n must be >= 1, got {self.synth_n}")
        if self.synth_size < 16:
            raise ConfigError(f"synth_size must be >= 16, got {self.synth_size}")


@dataclass
class TrainConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    region: RegionConfig = field(default_factory=lambda: RegionConfig(granularities=(4, 8, 16)))
    fem: FemConfig = field(default_factory=FemConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    epochs: int = 20
    max_steps: int | None = None
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    eval_batch: int = 8
    eval_every: int = 50
    seed: int = 0
    ema_decay: float = 0.99
    enable_fdc: bool = True
    enable_mrsc: bool = True
    enable_pix: bool = True
    fdc_low_only: bool = False
    fdc_high_only: bool = False
    student_noise_std: float = 0.0
    soft_mae: bool = True
    finetune_policy: str = "auto"
    init_from: str | None = None
    out_dir: str = "runs/exp"

    def validate(self) -> None:
        self.backbone.validate()
        self.region.validate()
        self.fem.validate()
        self.loss.validate()
        self.optimizer.validate()
        self.data.validate()
        for name, v in (("epochs", self.epochs), ("batch_labeled", self.batch_labeled),
                        ("batch_unlabeled", self.batch_unlabeled),
                        ("eval_batch", self.eval_batch), ("eval_every", self.eval_every)):
            if v < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.student_noise_std < 0:
            raise ConfigError(f"student_noise_std must be >= 0, got {self.student_noise_std}")
        if self.fdc_low_only and self.fdc_high_only:
            raise ConfigError("fdc_low_only and fdc_high_only cannot both be set")
        if self.finetune_policy not in FINETUNE_POLICIES:
            raise ConfigError(
                f"unknown finetune_policy '{self.finetune_policy}', "
                f"expected one of {FINETUNE_POLICIES}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for key in ("backbone", "region", "fem", "loss", "optimizer", "data"):
            d[key] = dict(d[key])
        d["backbone"]["stage_channels"] = list(self.backbone.stage_channels)
        d["region"]["granularities"] = list(self.region.granularities)
        return d

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "TrainConfig":
        payload = dict(payload)
        sections = {
            "backbone": (BackboneConfig, {"stage_channels": tuple}),
            "region": (RegionConfig, {"granularities": tuple}),
            "fem": (FemConfig, {}),
            "loss": (LossWeights, {}),
            "optimizer": (OptimizerConfig, {}),
            "data": (DataConfig, {}),
        }
        kwargs: dict[str, Any] = {}
        for name, (klass, coercions) in sections.items():
            if name in payload:
                section = dict(payload.pop(name))
                _reject_unknown(klass, section, name)
                for key, coerce in coercions.items():
                    if key in section and section[key] is not None:
                        section[key] = coerce(section[key])
                kwargs[name] = klass(**section)
        _reject_unknown(cls, payload, "config")
        return cls(**kwargs, **payload)


def _reject_unknown(klass, payload: dict[str, Any], where: str) -> None:
    known = {f.name for f in fields(klass)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def architecture_hash(config: TrainConfig) -> str:
    """Stable hash of the architecture-determining sub-configs.

    Seeds, paths and schedule knobs do not contribute, so evaluating a
    checkpoint under a different run setup stays legal while an architecture
    mismatch is caught.
    """
    d = config.to_dict()
    arch = {k: d[k] for k in ("backbone", "region", "fem")}
    blob = json.dumps(arch, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_config(config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))


def load_config(path: str | Path) -> TrainConfig:
    try:
        payload = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    try:
        return TrainConfig.from_dict(payload)
    except TypeError as exc:
        raise ConfigError(f"bad config file {path}: {exc}") from exc


def desk_config() -> TrainConfig:
    """CPU-friendly defaults: 64 px synthetic data, small model."""
    return TrainConfig()


def paper_config() -> TrainConfig:
    """Full-scale profile matching the published training recipe."""
    return TrainConfig(
        backbone=BackboneConfig(input_size=512, stage_channels=(64, 128, 256, 512),
                                decoder_channels=128, adapter_dim=32),
        region=RegionConfig(granularities=(16, 24, 32)),
        fem=FemConfig(patch_size=2, heads=8),
        loss=LossWeights(lambda_max=1.0, warmup_steps=None),
        optimizer=OptimizerConfig(lr=5e-4, weight_decay=1e-4, beta1=0.9),
        data=DataConfig(layout="kvasir", ratio=0.1, test_fraction=0.2),
        epochs=90,
        batch_labeled=5,
        batch_unlabeled=5,
        eval_batch=4,
        eval_every=200,
    )


PROFILES = {"desk": desk_config, "paper": paper_config}


def profile_config(name: str) -> TrainConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile '{name}', expected one of {sorted(PROFILES)}")
    return PROFILES[name]()


__all__ = ["OptimizerConfig", "DataConfig", "TrainConfig", "architecture_hash",
           "save_config", "load_config", "desk_config", "paper_config",
           "profile_config", "PROFILES"]
