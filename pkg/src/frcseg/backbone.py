"""Segmentation backbone: staged conv encoder with adapters, light decoder, head.

This is a small stand-in for a large pretrained hierarchical encoder. Each
stage halves the resolution; a bottleneck adapter (down-project, GELU,
up-project, residual) sits at the end of every stage so the selective
fine-tuning policy has something to train when the body is frozen. The
decoder upsamples back to stride 2 with skip connections, and the head
produces per-pixel class probabilities at full input resolution.

GroupNorm is used throughout. Nothing in the network depends on batch
composition, so student and teacher stay comparable sample by sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .frequency import FrequencyFeatures

PARAMETER_GROUPS = ("encoder_body", "adapters", "decoder", "seg_head", "fem", "region")


@dataclass
class BackboneConfig:
    input_size: int = 64
    stage_channels: tuple[int, ...] = (16, 32, 64, 96)
    decoder_channels: int = 32
    num_classes: int = 2
    adapter_dim: int = 8

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def encoder_downsample(self) -> int:
        return 2 ** self.num_stages

    # the decoder always climbs back to stride 2
    decoder_downsample = 2

    def validate(self) -> None:
        if self.num_stages < 2:
            raise ConfigError(f"need at least 2 encoder stages, got {self.num_stages}")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be positive, got {self.stage_channels}")
        if self.decoder_channels < 1:
            raise ConfigError(f"decoder_channels must be positive, got {self.decoder_channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.adapter_dim < 1:
            raise ConfigError(f"adapter_dim must be positive, got {self.adapter_dim}")
        if self.input_size < 2 * self.encoder_downsample \
                or self.input_size % self.encoder_downsample:
            raise ConfigError(
                f"input_size {self.input_size} must be a multiple of "
                f"{self.encoder_downsample} (2^num_stages) and leave a deepest "
                f"feature map of at least 2x2")


@dataclass
class ModelOutputs:
    """One forward pass: probabilities plus the features the losses consume."""

    probs: torch.Tensor             # (B, K, H, W), softmax over classes
    encoder_features: torch.Tensor  # (B, d, h, w) deepest encoder stage
    decoder_features: torch.Tensor  # (B, C, h', w') decoder output
    freq: FrequencyFeatures | None = None


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


class Adapter(nn.Module):
    """Bottleneck adapter: 1x1 down-projection, GELU, 1x1 up-projection, residual.

    The up-projection starts at zero so a fresh adapter is the identity.
    """

    def __init__(self, channels: int, bottleneck: int):
        super().__init__()
        self.down = nn.Conv2d(channels, bottleneck, 1)
        self.up = nn.Conv2d(bottleneck, channels, 1)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.up(F.gelu(self.down(x)))


class EncoderStage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, adapter_dim: int):
        super().__init__()
        self.down = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
        self.norm1 = _norm(out_channels)
        self.conv = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.norm2 = _norm(out_channels)
        self.adapter = Adapter(out_channels, adapter_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.gelu(self.norm1(self.down(x)))
        x = x + F.gelu(self.norm2(self.conv(x)))
        return self.adapter(x)


class DecoderStage(nn.Module):
    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.skip_proj = nn.Conv2d(skip_channels, out_channels, 1)
        self.fuse = nn.Conv2d(in_channels + out_channels, out_channels, 3, padding=1)
        self.norm = _norm(out_channels)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = torch.cat([x, self.skip_proj(skip)], dim=1)
        return F.gelu(self.norm(self.fuse(x)))


class Decoder(nn.Module):
    def __init__(self, stage_channels: Sequence[int], out_channels: int):
        super().__init__()
        n = len(stage_channels)
        self.in_proj = nn.Conv2d(stage_channels[-1], out_channels, 1)
        self.in_norm = _norm(out_channels)
        self.stages = nn.ModuleList(
            DecoderStage(out_channels, stage_channels[n - 2 - k], out_channels)
            for k in range(n - 1))

    def forward(self, stage_features: Sequence[torch.Tensor]) -> torch.Tensor:
        n = len(stage_features)
        x = F.gelu(self.in_norm(self.in_proj(stage_features[-1])))
        for k, stage in enumerate(self.stages):
            x = stage(x, stage_features[n - 2 - k])
        return x


class SegBackbone(nn.Module):
    """Encoder + decoder + segmentation head.

    forward returns (probs, encoder_features, decoder_features) where probs
    is softmax over classes at full input resolution, encoder_features is the
    deepest stage output (input_size / 2^num_stages) and decoder_features
    sits at stride 2.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        channels = (3,) + tuple(config.stage_channels)
        self.stages = nn.ModuleList(
            EncoderStage(channels[i], channels[i + 1], config.adapter_dim)
            for i in range(config.num_stages))
        self.decoder = Decoder(config.stage_channels, config.decoder_channels)
        self.seg_head = nn.Conv2d(config.decoder_channels, config.num_classes, 1)

    def forward(self, images: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        s = self.config.input_size
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[-2:] != (s, s):
            raise ConfigError(
                f"expected images of shape (B, 3, {s}, {s}), got {tuple(images.shape)}")
        feats = []
        x = images
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        decoded = self.decoder(feats)
        logits = self.seg_head(decoded)
        logits = F.interpolate(logits, size=(s, s), mode="bilinear", align_corners=False)
        return logits.softmax(dim=1), feats[-1], decoded

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups: dict[str, list[nn.Parameter]] = {
            "encoder_body": [], "adapters": [],
            "decoder": list(self.decoder.parameters()),
            "seg_head": list(self.seg_head.parameters()),
        }
        for stage in self.stages:
            adapter_params = set(map(id, stage.adapter.parameters()))
            groups["adapters"].extend(stage.adapter.parameters())
            groups["encoder_body"].extend(
                p for p in stage.parameters() if id(p) not in adapter_params)
        return groups


@dataclass(frozen=True)
class FreezePolicy:
    """Names of parameter groups that stay trainable."""

    trainable: frozenset[str]

    def __post_init__(self):
        unknown = self.trainable - set(PARAMETER_GROUPS)
        if unknown:
            raise ConfigError(
                f"unknown parameter groups {sorted(unknown)}, known: {PARAMETER_GROUPS}")

    @classmethod
    def train_all(cls) -> "FreezePolicy":
        """Everything trainable; the right default when no pretrained weights exist."""
        return cls(frozenset(PARAMETER_GROUPS))

    @classmethod
    def selective_finetune(cls) -> "FreezePolicy":
        """Fine-tune policy for a pretrained body: head, adapters and the two branches."""
        return cls(frozenset({"seg_head", "adapters", "fem", "region"}))


def trainable_parameter_filter(groups: Mapping[str, Sequence[nn.Parameter]],
                               policy: FreezePolicy) -> list[nn.Parameter]:
    """Select the parameters the optimizer may touch.

    Groups outside the policy are left untouched (their requires_grad flags
    are not modified; they simply never reach the optimizer).
    """
    missing = policy.trainable - set(groups)
    if missing:
        raise ConfigError(f"model has no parameter groups named {sorted(missing)}")
    selected: list[nn.Parameter] = []
    for name in PARAMETER_GROUPS:
        if name in policy.trainable and name in groups:
            selected.extend(groups[name])
    return selected
