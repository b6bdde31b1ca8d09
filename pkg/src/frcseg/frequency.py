"""Frequency branch: per-patch cosine transform and transformer enhancement.

Encoder features are cut into non-overlapping p x p patches, each patch is
transformed with an orthonormal 2D DCT-II, and the coefficients are stacked
into channels ordered from low to high frequency (zigzag order). The low and
high halves of the resulting channel stack are enhanced by separate
transformer blocks, fused by a third, and compared between student and
teacher by the frequency consistency loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError


@lru_cache(maxsize=None)
def zigzag_order(patch_size: int) -> tuple[tuple[int, int], ...]:
    """Return (u, v) frequency index pairs of a patch in zigzag scan order.

    The scan walks anti-diagonals of constant u + v starting at the DC term
    (0, 0), alternating direction on every diagonal, so coefficients come out
    ordered from low to high spatial frequency.
    """
    if patch_size < 1:
        raise ConfigError(f"patch_size must be >= 1, got {patch_size}")
    p = patch_size
    order = []
    for s in range(2 * p - 1):
        if s % 2 == 0:
            us = range(min(s, p - 1), max(0, s - p + 1) - 1, -1)
        else:
            us = range(max(0, s - p + 1), min(s, p - 1) + 1)
        order.extend((u, s - u) for u in us)
    return tuple(order)


@lru_cache(maxsize=None)
def _dct_basis_array(patch_size: int) -> np.ndarray:
    # Orthonormal DCT-II basis: T[u, i] = a(u) * cos((2i + 1) * u * pi / (2p)),
    # a(0) = sqrt(1/p), a(u>0) = sqrt(2/p). Rows are orthonormal, so T @ T.T = I.
    p = patch_size
    i = np.arange(p, dtype=np.float64)
    u = np.arange(p, dtype=np.float64)[:, None]
    basis = np.cos((2.0 * i + 1.0) * u * math.pi / (2.0 * p)) * math.sqrt(2.0 / p)
    basis[0] *= math.sqrt(0.5)
    return basis


def dct_basis(patch_size: int, dtype: torch.dtype = torch.float32,
              device: torch.device | str = "cpu") -> torch.Tensor:
    """Orthonormal DCT-II basis matrix of shape (patch_size, patch_size)."""
    if patch_size < 1:
        raise ConfigError(f"patch_size must be >= 1, got {patch_size}")
    return torch.as_tensor(_dct_basis_array(patch_size), dtype=dtype, device=device)


def block_dct(features: torch.Tensor, patch_size: int = 2) -> torch.Tensor:
    """Per-patch 2D DCT-II of a feature map.

    Args:
        features: (B, d, h, w) tensor; h and w must be divisible by patch_size.
        patch_size: patch edge length p.

    Returns:
        (B, p*p*d, h/p, w/p) tensor. Output channel ``r * d + c`` holds the
        coefficient of zigzag rank ``r`` computed from input channel ``c``,
        so channels are sorted from low to high frequency.
    """
    if features.dim() != 4:
        raise ValueError(f"expected a 4D feature map, got shape {tuple(features.shape)}")
    b, d, h, w = features.shape
    p = patch_size
    if p < 1:
        raise ConfigError(f"patch_size must be >= 1, got {p}")
    if h % p != 0 or w % p != 0:
        raise ValueError(f"spatial dims ({h}, {w}) are not divisible by patch_size {p}")
    basis = dct_basis(p, features.dtype, features.device)
    patches = features.reshape(b, d, h // p, p, w // p, p)
    # Y = T X T^T applied per patch; i and j index rows/cols inside a patch.
    coeffs = torch.einsum("ui,bdhiwj,vj->bdhwuv", basis, patches, basis)
    coeffs = coeffs.reshape(b, d, h // p, w // p, p * p)
    flat_ranks = torch.tensor([u * p + v for u, v in zigzag_order(p)],
                              device=features.device)
    coeffs = coeffs.index_select(-1, flat_ranks)
    # (b, d, h/p, w/p, r) -> (b, r, d, h/p, w/p) -> (b, r*d, h/p, w/p)
    coeffs = coeffs.permute(0, 4, 1, 2, 3)
    return coeffs.reshape(b, p * p * d, h // p, w // p)


def split_low_high(raw: torch.Tensor, patch_size: int = 2) -> tuple[torch.Tensor, torch.Tensor]:
    """Split stacked frequency channels into low and high halves.

    Channels produced by :func:`block_dct` are frequency-ascending, so the
    first half of the channel axis is the low-frequency component and the
    second half the high-frequency component.
    """
    if raw.dim() != 4:
        raise ValueError(f"expected a 4D tensor, got shape {tuple(raw.shape)}")
    c = raw.shape[1]
    if c % (patch_size * patch_size) != 0:
        raise ValueError(f"channel count {c} is not a multiple of patch_size^2 = {patch_size * patch_size}")
    if c % 2 != 0:
        raise ValueError(f"channel count {c} is odd and cannot be halved")
    half = c // 2
    return raw[:, :half], raw[:, half:]


@dataclass
class FrequencyFeatures:
    """Everything the frequency branch produces for one batch."""

    raw: torch.Tensor            # (B, p*p*d, h/p, w/p) stacked DCT coefficients
    low: torch.Tensor            # low-frequency half of raw
    high: torch.Tensor           # high-frequency half of raw
    enhanced: torch.Tensor       # fused transformer output, same shape as raw
    enhanced_low: torch.Tensor   # low branch after its transformer block
    enhanced_high: torch.Tensor  # high branch after its transformer block
    patch_size: int


@dataclass
class FemConfig:
    """Hyperparameters of the frequency enhancement module (depth is fixed at 3 blocks)."""

    patch_size: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0

    def validate(self) -> None:
        if self.patch_size < 1:
            raise ConfigError(f"fem.patch_size must be >= 1, got {self.patch_size}")
        if self.heads < 1:
            raise ConfigError(f"fem.heads must be >= 1, got {self.heads}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"fem.mlp_ratio must be > 0, got {self.mlp_ratio}")


class TransformerBlock(nn.Module):
    """Pre-norm transformer block: multi-head self-attention + MLP, both residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"token width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def _attention(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self._attention(self.norm1(x))
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x


def _to_tokens(x: torch.Tensor) -> torch.Tensor:
    b, c, h, w = x.shape
    return x.permute(0, 2, 3, 1).reshape(b, h * w, c)


def _to_map(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b, n, c = tokens.shape
    return tokens.reshape(b, h, w, c).permute(0, 3, 1, 2)


class FrequencyEnhancer(nn.Module):
    """Three-block enhancement of split frequency features.

    The low and high halves each get a learnable position embedding and their
    own transformer block; the two enhanced halves are concatenated along the
    channel axis and fused by a third block. Output shape equals the raw
    stacked-coefficient shape.
    """

    def __init__(self, grid_size: tuple[int, int], channels: int,
                 heads: int = 4, mlp_ratio: float = 4.0):
        super().__init__()
        gh, gw = grid_size
        if gh < 1 or gw < 1:
            raise ConfigError(f"invalid token grid {grid_size}")
        if channels % 2 != 0:
            raise ConfigError(f"frequency channel count {channels} must be even to split")
        half = channels // 2
        if half % heads != 0:
            raise ConfigError(
                f"heads must divide the per-branch width: {half} % {heads} != 0")
        self.grid_size = (gh, gw)
        self.channels = channels
        self.pos_low = nn.Parameter(torch.zeros(1, gh * gw, half))
        self.pos_high = nn.Parameter(torch.zeros(1, gh * gw, half))
        nn.init.trunc_normal_(self.pos_low, std=0.02)
        nn.init.trunc_normal_(self.pos_high, std=0.02)
        self.block_low = TransformerBlock(half, heads, mlp_ratio)
        self.block_high = TransformerBlock(half, heads, mlp_ratio)
        self.block_fused = TransformerBlock(channels, heads, mlp_ratio)

    def forward(self, low: torch.Tensor, high: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Enhance the two halves; returns (fused, enhanced_low, enhanced_high)."""
        gh, gw = self.grid_size
        half = self.channels // 2
        for name, t in (("low", low), ("high", high)):
            if t.dim() != 4 or t.shape[1] != half or t.shape[2] != gh or t.shape[3] != gw:
                raise ValueError(
                    f"{name} input shape {tuple(t.shape)} does not match "
                    f"(B, {half}, {gh}, {gw})")
        tokens_low = self.block_low(_to_tokens(low) + self.pos_low)
        tokens_high = self.block_high(_to_tokens(high) + self.pos_high)
        fused = self.block_fused(torch.cat([tokens_low, tokens_high], dim=-1))
        return (_to_map(fused, gh, gw),
                _to_map(tokens_low, gh, gw),
                _to_map(tokens_high, gh, gw))
