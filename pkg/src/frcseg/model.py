"""Composite network: backbone plus the frequency and region branches.

This is the module the trainer instantiates twice, once as the student and
once (via deep copy) as the EMA teacher.
"""

from __future__ import annotations

import torch
from torch import nn

from .backbone import BackboneConfig, ModelOutputs, SegBackbone
from .errors import ConfigError
from .frequency import FemConfig, FrequencyEnhancer, FrequencyFeatures, block_dct, split_low_high
from .region import RegionConfig, RegionProjector


class SegModel(nn.Module):
    def __init__(self, backbone: BackboneConfig, region: RegionConfig | None = None,
                 fem: FemConfig | None = None):
        super().__init__()
        region = region if region is not None else RegionConfig()
        fem = fem if fem is not None else FemConfig()
        backbone.validate()
        region.validate()
        fem.validate()
        encoder_size = backbone.input_size // backbone.encoder_downsample
        if encoder_size % fem.patch_size != 0:
            raise ConfigError(
                f"encoder feature size {encoder_size} is not divisible by "
                f"patch_size {fem.patch_size}")
        grid = encoder_size // fem.patch_size
        channels = fem.patch_size ** 2 * backbone.stage_channels[-1]
        self.backbone = SegBackbone(backbone)
        self.fem = FrequencyEnhancer((grid, grid), channels, fem.heads, fem.mlp_ratio)
        self.region_projector = RegionProjector(
            region, backbone.decoder_channels,
            backbone.input_size // backbone.decoder_downsample)
        self.backbone_config = backbone
        self.region_config = region
        self.fem_config = fem

    def forward(self, images: torch.Tensor) -> ModelOutputs:
        probs, encoder_features, decoder_features = self.backbone(images)
        raw = block_dct(encoder_features, self.fem_config.patch_size)
        low, high = split_low_high(raw, self.fem_config.patch_size)
        enhanced, enhanced_low, enhanced_high = self.fem(low, high)
        freq = FrequencyFeatures(raw, low, high, enhanced, enhanced_low,
                                 enhanced_high, self.fem_config.patch_size)
        return ModelOutputs(probs, encoder_features, decoder_features, freq)

    def region_similarities(self, decoder_features: torch.Tensor) -> dict[int, torch.Tensor]:
        return self.region_projector.similarities(decoder_features)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = self.backbone.parameter_groups()
        groups["fem"] = list(self.fem.parameters())
        groups["region"] = list(self.region_projector.parameters())
        return groups
