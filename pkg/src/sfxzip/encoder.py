"""Latent encoder: transformer blocks at full frame rate, a per-frame linear
reduction C -> C/c, then average pooling over windows of t frames."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgument
from .nn import Block, RopeTable, avg_pool_time

# blocks per target conditioning rate; lower rates get deeper encoders
DEPTH_BY_RATE = {Fraction(25): 6, Fraction(100, 9): 10, Fraction(5): 12, Fraction(1): 12}


@dataclass
class EncoderConfig:
    depth: int = 6
    c: int = 2
    t: int = 4
    model_dim: int = 128
    heads: int = 4
    channels: int = 128

    def __post_init__(self):
        if self.depth < 0:
            raise InvalidArgument("encoder depth must be >= 0")
        if self.c < 1 or self.channels % self.c:
            raise InvalidArgument(f"c={self.c} must divide C={self.channels}")
        if self.t < 1:
            raise InvalidArgument("temporal stride t must be >= 1")
        if self.model_dim % self.heads or (self.model_dim // self.heads) % 2:
            raise InvalidArgument("model_dim / heads must be an even integer")

    @property
    def out_dim(self) -> int:
        return self.channels // self.c

    def frame_rate(self, latent_rate) -> Fraction:
        return Fraction(latent_rate) / self.t


@dataclass
class CompressedLatent:
    data: np.ndarray  # D x T'
    frame_rate: Fraction


def decimated_positions(T: int, t: int) -> list[int]:
    """Rotary position of each pooled window: its (lower-)central frame."""
    if t < 1:
        raise InvalidArgument("stride must be >= 1")
    return [i * t + (t - 1) // 2 for i in range(T // t)]


def depth_for_framerate(frame_rate) -> int:
    rate = Fraction(frame_rate).limit_denominator(10_000)
    nearest = min(DEPTH_BY_RATE, key=lambda r: (abs(r - rate), r))
    return DEPTH_BY_RATE[nearest]


class LatentEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.channels, cfg.model_dim) if cfg.model_dim != cfg.channels else None
        self.blocks = nn.ModuleList([Block(cfg.model_dim, cfg.heads) for _ in range(cfg.depth)])
        self.out = nn.Linear(cfg.model_dim, cfg.out_dim)

    def forward(self, x0: torch.Tensor) -> torch.Tensor:
        """x0: [..., C, T] -> z: [..., C/c, floor(T/t)]."""
        if x0.shape[-2] != self.cfg.channels:
            raise InvalidArgument(f"expected {self.cfg.channels} channels, got {x0.shape[-2]}")
        T = x0.shape[-1]
        if T < self.cfg.t:
            raise InvalidArgument(f"{T} frames is shorter than stride {self.cfg.t}")
        h = x0.transpose(-1, -2)
        if self.in_proj is not None:
            h = self.in_proj(h)
        rope = RopeTable(torch.arange(T), self.cfg.model_dim // self.cfg.heads)
        for blk in self.blocks:
            h, _ = blk(h, rope)
        return avg_pool_time(self.out(h).transpose(-1, -2), self.cfg.t)


def encoder_forward(x0, encoder: LatentEncoder) -> CompressedLatent:
    data = torch.as_tensor(np.asarray(x0.data), dtype=next(encoder.parameters()).dtype)
    with torch.no_grad():
        z = encoder(data)
    return CompressedLatent(z.numpy().astype(np.float64), encoder.cfg.frame_rate(x0.latent_rate))
