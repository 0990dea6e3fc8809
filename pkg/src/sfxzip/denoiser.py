"""Conditional denoiser with EDM preconditioning.

The network F sees the noisy latent (scaled by c_in), a noise-level
embedding, an optional class embedding, and the compressed conditioning as a
separate token stream ("audio-down") placed at decimated rotary positions.
Base weights are adapted through LoRA; the conditioning projection and the
context Q/K/V layers are their own parameter groups.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoder import decimated_positions
from .errors import InvalidArgument
from .nn import Block, RMSNorm, RopeTable


@dataclass
class EdmParams:
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        if not self.sigma_data > 0 or not self.p_std >= 0:
            raise InvalidArgument("sigma_data must be > 0 and p_std >= 0")


def precondition_coeffs(sigma, p: EdmParams = EdmParams()):
    """(c_skip, c_out, c_in, c_noise) for noise level sigma (float or tensor)."""
    s = torch.as_tensor(sigma, dtype=torch.float64) if not torch.is_tensor(sigma) else sigma
    if torch.any(s <= 0):
        raise InvalidArgument("sigma must be positive")
    sd2 = p.sigma_data ** 2
    c_skip = sd2 / (s ** 2 + sd2)
    c_out = s * p.sigma_data / torch.sqrt(s ** 2 + sd2)
    c_in = 1 / torch.sqrt(s ** 2 + sd2)
    c_noise = torch.log(s) / 4
    if not torch.is_tensor(sigma):
        return tuple(float(c) for c in (c_skip, c_out, c_in, c_noise))
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma, p: EdmParams = EdmParams()):
    """lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2."""
    return (sigma ** 2 + p.sigma_data ** 2) / (sigma * p.sigma_data) ** 2


@dataclass
class DecoderConfig:
    channels: int = 128
    cond_dim: int = 64
    model_dim: int = 128
    heads: int = 4
    joint_blocks: int = 4
    audio_blocks: int = 2
    num_classes: int = 5
    noise_features: int = 64
    lora_rank: int = 8
    lora_alpha: float = 16.0

    def __post_init__(self):
        if self.model_dim % self.heads or (self.model_dim // self.heads) % 2:
            raise InvalidArgument("model_dim / heads must be an even integer")


@dataclass
class Conditioning:
    """Per-batch conditioning. ``audio_tokens`` is [B, T', model] or None."""

    audio_tokens: torch.Tensor | None
    audio_positions: list[int]
    stride: int = 1
    class_id: torch.Tensor | None = None
    class_dropped: torch.Tensor | bool = False

    def __post_init__(self):
        n = 0 if self.audio_tokens is None else self.audio_tokens.shape[-2]
        if n != len(self.audio_positions):
            raise InvalidArgument(f"{n} conditioning tokens but {len(self.audio_positions)} positions")
        p = self.audio_positions
        if any(b <= a for a, b in zip(p, p[1:])):
            raise InvalidArgument("conditioning positions must be strictly increasing")


class Denoiser(nn.Module):
    """Raw network F plus the conditioning projection f_phi."""

    def __init__(self, cfg: DecoderConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("noise_freqs", torch.randn(cfg.noise_features, generator=g))
        self.register_buffer("noise_phases", torch.rand(cfg.noise_features, generator=g))
        self.cond_proj = nn.Linear(cfg.cond_dim, d)  # f_phi
        self.in_proj = nn.Linear(cfg.channels, d)
        self.noise_mlp = nn.Sequential(nn.Linear(cfg.noise_features, d), nn.GELU(), nn.Linear(d, d))
        self.class_embed = nn.Embedding(cfg.num_classes, d)
        self.blocks = nn.ModuleList(
            [Block(d, cfg.heads, with_ctx=True, cond_dim=d) for _ in range(cfg.joint_blocks)]
            + [Block(d, cfg.heads, with_ctx=False, cond_dim=d) for _ in range(cfg.audio_blocks)]
        )
        self.out_norm = RMSNorm(d)
        self.out_proj = nn.Linear(d, cfg.channels)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    # parameter groups ---------------------------------------------------------
    def add_adapters(self, rank: int | None = None, alpha: float | None = None, seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        for blk in self.blocks:
            for layer in blk.lora_layers():
                layer.add_adapter(rank or self.cfg.lora_rank, self.cfg.lora_alpha if alpha is None else alpha, g)

    def set_adapters_enabled(self, flag: bool):
        for blk in self.blocks:
            for layer in blk.lora_layers():
                layer.adapters_enabled = flag

    def group_of(self, name: str) -> str:
        if "lora_" in name:
            return "lora"
        if name.startswith("cond_proj."):
            return "cond_proj"
        if ".attn.ctx_" in name:
            return "ctx"
        return "base"

    def named_group(self, *groups: str) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if self.group_of(n) in groups}

    # forward ------------------------------------------------------------------
    def noise_embedding(self, c_noise: torch.Tensor) -> torch.Tensor:
        f = torch.cos(2 * math.pi * (c_noise[..., None] * self.noise_freqs + self.noise_phases))
        return self.noise_mlp(f * math.sqrt(2))

    def raw(self, x_in: torch.Tensor, c_noise: torch.Tensor, cond: Conditioning) -> torch.Tensor:
        """F(c_in x; c_noise, cond) for x_in [B, C, T]."""
        B, C, T = x_in.shape
        h = self.in_proj(x_in.transpose(-1, -2))
        emb = self.noise_embedding(c_noise.reshape(-1).expand(B) if c_noise.numel() == 1 else c_noise)
        if cond.class_id is not None:
            keep = ~torch.as_tensor(cond.class_dropped, dtype=torch.bool).expand(B)
            cls = self.class_embed(torch.as_tensor(cond.class_id).expand(B))
            emb = emb + cls * keep[:, None].to(cls.dtype)
        head_dim = self.cfg.model_dim // self.cfg.heads
        rope_x = RopeTable(torch.arange(T), head_dim)
        ctx = cond.audio_tokens
        rope_ctx = None
        if ctx is not None and ctx.shape[-2] > 0:
            rope_ctx = RopeTable(cond.audio_positions, head_dim)
            ctx = ctx.expand(B, *ctx.shape[-2:])
        else:
            ctx = None
        for blk in self.blocks:
            h, ctx = blk(h, rope_x, ctx, rope_ctx, emb)
        return self.out_proj(self.out_norm(h)).transpose(-1, -2)


def build_conditioning(z: torch.Tensor, f_phi: nn.Module, t: int, T: int, class_id=None,
                       class_dropped=False) -> Conditioning:
    """Project compressed frames z [..., D, T'] to audio-down tokens at decimated positions."""
    z = torch.as_tensor(z)
    if z.shape[-1] != T // t:
        raise InvalidArgument(f"z has {z.shape[-1]} frames but floor({T}/{t}) = {T // t}")
    tokens = f_phi(z.transpose(-1, -2))
    return Conditioning(tokens, decimated_positions(T, t), t, class_id, class_dropped)


def check_alignment(cond: Conditioning, T: int):
    if cond.audio_tokens is None or not cond.audio_positions:
        return
    expected = decimated_positions(T, cond.stride)
    if cond.audio_positions != expected[: len(cond.audio_positions)] or len(cond.audio_positions) > len(expected):
        raise InvalidArgument(
            f"conditioning positions {cond.audio_positions[:4]}... are not the stride-{cond.stride} centres of {T} frames")


def denoise(x_noisy: torch.Tensor, sigma, cond: Conditioning, model, p: EdmParams = EdmParams()) -> torch.Tensor:
    """D(x; sigma) = c_skip x + c_out F(c_in x; c_noise, cond) for x [B, C, T]."""
    x = torch.as_tensor(x_noisy)
    check_alignment(cond, x.shape[-1])
    s = torch.as_tensor(sigma, dtype=x.dtype).reshape(-1)
    if torch.any(s <= 0):
        raise InvalidArgument("sigma must be positive")
    c_skip, c_out, c_in, c_noise = precondition_coeffs(s, p)
    b = (-1, 1, 1) if x.dim() == 3 else (-1, 1)
    F = model.raw(x * c_in.reshape(b), c_noise, cond)
    return c_skip.reshape(b) * x + c_out.reshape(b) * F


class ZeroNet(nn.Module):
    """F = 0. With EDM preconditioning this is exactly the posterior-mean
    denoiser for data ~ N(0, sigma_data^2 I)."""

    def raw(self, x_in, c_noise, cond):
        return torch.zeros_like(x_in)


def gaussian_denoiser(sigma_data: float = 0.5):
    def D(x, sigma):
        return (sigma_data ** 2 / (sigma_data ** 2 + sigma ** 2)) * x
    return D
