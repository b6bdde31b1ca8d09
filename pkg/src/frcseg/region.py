"""Region branch: multi-granularity region projection and similarity matrices.

Decoder features are resampled onto g x g region grids, flattened row-major
into per-region feature vectors, and turned into a g^2 x g^2 Gram matrix of
pairwise inner products. Matching these matrices between student and teacher
at several granularities is the region consistency loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError

PROJECTIONS = ("linear", "avgpool", "maxpool", "conv")


@dataclass
class RegionConfig:
    granularities: tuple[int, ...] = (16, 24, 32)
    projection: str = "linear"
    normalize_rows: bool = False

    def validate(self) -> None:
        if self.projection not in PROJECTIONS:
            raise ConfigError(
                f"unknown projection '{self.projection}', expected one of {PROJECTIONS}")
        seen = set()
        for g in self.granularities:
            if not isinstance(g, int) or g < 1:
                raise ConfigError(f"granularities must be positive ints, got {g!r}")
            if g in seen:
                raise ConfigError(f"duplicate granularity {g}")
            seen.add(g)


def project_regions(features: torch.Tensor, granularity: int,
                    projection: str = "linear",
                    conv: nn.Module | None = None) -> torch.Tensor:
    """Resample a feature map onto a g x g region grid and flatten it.

    Args:
        features: (B, C, h, w) decoder feature map.
        granularity: region grid edge g.
        projection: one of 'linear' (bilinear resampling), 'avgpool',
            'maxpool' (adaptive pooling) or 'conv' (strided kernel supplied
            via ``conv``).
        conv: the strided convolution to apply for the 'conv' variant.

    Returns:
        (B, g*g, C) region features, rows in row-major grid order, so the
        row index of cell (y, x) is ``y * g + x``.
    """
    if features.dim() != 4:
        raise ValueError(f"expected a 4D feature map, got shape {tuple(features.shape)}")
    g = granularity
    if not isinstance(g, int) or g < 1:
        raise ConfigError(f"granularity must be a positive int, got {g!r}")
    b, c, h, w = features.shape
    if projection == "linear":
        if (h, w) == (g, g):
            grid = features
        else:
            grid = F.interpolate(features, size=(g, g), mode="bilinear",
                                 align_corners=False)
    elif projection in ("avgpool", "maxpool"):
        if g > h or g > w:
            raise ConfigError(
                f"granularity {g} exceeds feature map size ({h}, {w}) for {projection}")
        if projection == "avgpool":
            grid = F.adaptive_avg_pool2d(features, g)
        else:
            grid = F.adaptive_max_pool2d(features, g)
    elif projection == "conv":
        if conv is None:
            raise ConfigError("projection 'conv' needs its kernel; use a RegionProjector")
        if h % g != 0 or w % g != 0:
            raise ConfigError(
                f"'conv' projection needs the feature size ({h}, {w}) divisible by g={g}")
        grid = conv(features)
        if grid.shape[-2:] != (g, g):
            raise ConfigError(
                f"conv kernel produced grid {tuple(grid.shape[-2:])}, expected ({g}, {g})")
    else:
        raise ConfigError(f"unknown projection '{projection}'")
    return grid.permute(0, 2, 3, 1).reshape(b, g * g, c)


def region_similarity(regions: torch.Tensor, normalize_rows: bool = False) -> torch.Tensor:
    """Gram matrix of region features: A = R R^T, shape (B, g*g, g*g).

    With ``normalize_rows`` each region vector is L2-normalized first, making
    entries cosine similarities in [-1, 1].
    """
    if regions.dim() != 3:
        raise ValueError(f"expected (B, n, C) region features, got {tuple(regions.shape)}")
    r = F.normalize(regions, dim=-1) if normalize_rows else regions
    return torch.bmm(r, r.transpose(1, 2))


class RegionProjector(nn.Module):
    """Configured projection over all granularities; owns kernels for 'conv'.

    The 'linear', 'avgpool' and 'maxpool' variants are parameter free; the
    'conv' variant holds one trainable strided kernel per granularity with
    kernel size = stride = feature_size / g, which requires divisibility.
    """

    def __init__(self, config: RegionConfig, feature_channels: int,
                 feature_size: int | None = None):
        super().__init__()
        config.validate()
        self.config = config
        self.kernels = nn.ModuleDict()
        if config.projection == "conv":
            if feature_size is None:
                raise ConfigError("'conv' projection needs the decoder feature size")
            for g in config.granularities:
                if feature_size % g != 0:
                    raise ConfigError(
                        f"'conv' projection needs feature size {feature_size} "
                        f"divisible by granularity {g}")
                k = feature_size // g
                self.kernels[str(g)] = nn.Conv2d(feature_channels, feature_channels,
                                                 kernel_size=k, stride=k)

    def project(self, features: torch.Tensor, granularity: int) -> torch.Tensor:
        conv = None
        if self.config.projection == "conv":
            key = str(granularity)
            if key not in self.kernels:
                raise ConfigError(f"no conv kernel configured for granularity {granularity}")
            conv = self.kernels[key]
        return project_regions(features, granularity, self.config.projection, conv)

    def similarities(self, features: torch.Tensor) -> dict[int, torch.Tensor]:
        return {g: region_similarity(self.project(features, g), self.config.normalize_rows)
                for g in self.config.granularities}

    def forward(self, features: torch.Tensor) -> dict[int, torch.Tensor]:
        return self.similarities(features)


def multi_granularity_similarities(features: torch.Tensor, config: RegionConfig,
                                   projector: RegionProjector | None = None
                                   ) -> dict[int, torch.Tensor]:
    """Similarity matrices for every configured granularity.

    The stateless variants work directly from ``config``; the 'conv' variant
    carries trainable kernels and therefore needs the ``projector``.
    """
    if projector is not None:
        return projector.similarities(features)
    config.validate()
    if config.projection == "conv":
        raise ConfigError("'conv' projection is stateful; pass the model's RegionProjector")
    return {g: region_similarity(project_regions(features, g, config.projection),
                                 config.normalize_rows)
            for g in config.granularities}
