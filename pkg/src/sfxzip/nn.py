"""Small differentiable building blocks on top of torch autograd.

Layers keep base weights and low-rank adapters as separate parameters so the
training stages can route gradients by parameter group.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from safetensors.torch import load_file, save_file
from torch import nn

from .errors import InvalidArgument, NumericFailure

ROPE_BASE = 10000.0


# -- functional ops ------------------------------------------------------------

def linear(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != W.shape[1] or (b is not None and b.shape != (W.shape[0],)):
        raise InvalidArgument(f"linear: x[..., {x.shape[-1]}] vs W{tuple(W.shape)}")
    return F.linear(x, W, b)


def rmsnorm(x: torch.Tensor, g: torch.Tensor | None = None, eps: float = 1e-6) -> torch.Tensor:
    y = x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps)
    return y if g is None else y * g


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def avg_pool_time(x: torch.Tensor, t: int) -> torch.Tensor:
    """Mean over non-overlapping windows of ``t`` frames along the last axis."""
    if t <= 0:
        raise InvalidArgument("pooling stride must be positive")
    T = x.shape[-1]
    if T < t:
        raise InvalidArgument(f"cannot pool {T} frames with stride {t}")
    n = T // t
    return x[..., : n * t].reshape(*x.shape[:-1], n, t).mean(-1)


def lora_apply(W: torch.Tensor, A: torch.Tensor, B: torch.Tensor, alpha: float) -> torch.Tensor:
    """Effective weight W + (alpha / r) B A."""
    r = A.shape[0]
    if A.shape[1] != W.shape[1] or B.shape != (W.shape[0], r):
        raise InvalidArgument(f"adapter shapes A{tuple(A.shape)} B{tuple(B.shape)} do not fit W{tuple(W.shape)}")
    if r > min(W.shape):
        raise InvalidArgument(f"adapter rank {r} exceeds min{tuple(W.shape)}")
    return W + (alpha / r) * (B @ A)


@dataclass
class RopeTable:
    positions: torch.Tensor
    head_dim: int
    base: float = ROPE_BASE

    def __post_init__(self):
        self.positions = torch.as_tensor(self.positions, dtype=torch.long)
        if self.head_dim % 2:
            raise InvalidArgument("rotary head_dim must be even")
        p = self.positions
        if p.numel() and (p.min() < 0 or (p.numel() > 1 and not torch.all(p[1:] > p[:-1]))):
            raise InvalidArgument("rotary positions must be non-negative and strictly increasing")

    def angles(self, dtype=torch.float64) -> torch.Tensor:
        inv = self.base ** (-torch.arange(0, self.head_dim, 2, dtype=torch.float64) / self.head_dim)
        return (self.positions.to(torch.float64)[:, None] * inv[None, :]).to(dtype)


def apply_rope(x: torch.Tensor, table: RopeTable) -> torch.Tensor:
    """Rotate channel pairs (i, i + head_dim/2) of x[..., S, head_dim]."""
    ang = table.angles(torch.float64)
    cos, sin = ang.cos().to(x.dtype), ang.sin().to(x.dtype)
    h = x.shape[-1] // 2
    x1, x2 = x[..., :h], x[..., h:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def _split(x, heads):
    *lead, S, d = x.shape
    return x.reshape(*lead, S, heads, d // heads).transpose(-3, -2)


def _merge(x):
    *lead, H, S, dh = x.shape
    return x.transpose(-3, -2).reshape(*lead, S, H * dh)


def joint_attention(q, k, v, heads, rope_x, ctx_qkv=None, rope_ctx=None):
    """Softmax attention of audio queries (and optional context queries) over
    the concatenation of audio and context keys/values.

    q, k, v: [..., T, model]; ctx_qkv: (qc, kc, vc) each [..., S, model].
    Returns (audio_out, ctx_out or None) before the output projection.
    """
    dh = q.shape[-1] // heads
    q, k, v = (_split(a, heads) for a in (q, k, v))
    q, k = apply_rope(q, rope_x), apply_rope(k, rope_x)
    qc = None
    if ctx_qkv is not None:
        qc, kc, vc = (_split(a, heads) for a in ctx_qkv)
        qc, kc = apply_rope(qc, rope_ctx), apply_rope(kc, rope_ctx)
        k = torch.cat([k, kc], dim=-2)
        v = torch.cat([v, vc], dim=-2)
    scale = 1.0 / math.sqrt(dh)
    out = _merge(torch.softmax(q @ k.transpose(-1, -2) * scale, dim=-1) @ v)
    ctx_out = None
    if qc is not None:
        ctx_out = _merge(torch.softmax(qc @ k.transpose(-1, -2) * scale, dim=-1) @ v)
    return out, ctx_out


def mha(x, ctx, rope_x: RopeTable, rope_ctx: RopeTable | None, heads: int, weights: dict) -> torch.Tensor:
    """Functional multi-head attention with rotary positions.

    ``weights`` holds Wq, Wk, Wv, Wo and, when ``ctx`` is given, the context
    projections Wcq, Wck, Wcv. Returns the audio-stream output [T, model].
    """
    model = x.shape[-1]
    if model % heads:
        raise InvalidArgument(f"model dim {model} not divisible by {heads} heads")
    if ctx is not None and ctx.shape[-1] != model:
        raise InvalidArgument("context width must match model width")
    q, k, v = (linear(x, weights[n]) for n in ("Wq", "Wk", "Wv"))
    ctx_qkv = None
    if ctx is not None:
        ctx_qkv = tuple(linear(ctx, weights[n]) for n in ("Wcq", "Wck", "Wcv"))
    out, _ = joint_attention(q, k, v, heads, rope_x, ctx_qkv, rope_ctx)
    return linear(out, weights["Wo"])


# -- modules ---------------------------------------------------------------------

class LoRALinear(nn.Module):
    """Linear layer whose weight can be adapted by a low-rank update.

    The adapter starts with B = 0 so attaching it leaves the function unchanged.
    """

    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        nn.init.xavier_uniform_(self.weight)
        self.lora_A = None
        self.lora_B = None
        self.alpha = 0.0
        self.adapters_enabled = True

    def add_adapter(self, rank: int, alpha: float, generator: torch.Generator | None = None):
        d_out, d_in = self.weight.shape
        if not 1 <= rank <= min(d_out, d_in):
            raise InvalidArgument(f"adapter rank {rank} invalid for {d_out}x{d_in}")
        A = torch.empty(rank, d_in, dtype=self.weight.dtype)
        bound = 1.0 / math.sqrt(d_in)
        A.uniform_(-bound, bound, generator=generator)
        self.lora_A = nn.Parameter(A)
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, dtype=self.weight.dtype))
        self.alpha = float(alpha)

    def effective_weight(self) -> torch.Tensor:
        if self.lora_A is None or not self.adapters_enabled:
            return self.weight
        return lora_apply(self.weight, self.lora_A, self.lora_B, self.alpha)

    def forward(self, x):
        y = F.linear(x, self.weight, self.bias)
        if self.lora_A is not None and self.adapters_enabled:
            y = y + (self.alpha / self.lora_A.shape[0]) * F.linear(F.linear(x, self.lora_A), self.lora_B)
        return y


class RMSNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return rmsnorm(x, self.gain)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, with_ctx: bool = False):
        super().__init__()
        if dim % heads:
            raise InvalidArgument(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = LoRALinear(dim, dim, bias=False)
        self.k = LoRALinear(dim, dim, bias=False)
        self.v = LoRALinear(dim, dim, bias=False)
        self.o = LoRALinear(dim, dim)
        self.with_ctx = with_ctx
        if with_ctx:
            # dedicated projections for the conditioning modality
            self.ctx_norm = RMSNorm(dim)
            self.ctx_q = nn.Linear(dim, dim, bias=False)
            self.ctx_k = nn.Linear(dim, dim, bias=False)
            self.ctx_v = nn.Linear(dim, dim, bias=False)

    def forward(self, x, rope_x, ctx=None, rope_ctx=None):
        ctx_qkv = None
        if self.with_ctx and ctx is not None and ctx.shape[-2] > 0:
            c = self.ctx_norm(ctx)
            ctx_qkv = (self.ctx_q(c), self.ctx_k(c), self.ctx_v(c))
        out, ctx_out = joint_attention(self.q(x), self.k(x), self.v(x), self.heads, rope_x, ctx_qkv, rope_ctx)
        return self.o(out), (self.o(ctx_out) if ctx_out is not None else None)


class Block(nn.Module):
    """Pre-norm transformer block: RMSNorm -> attention, RMSNorm -> GELU MLP (x4).

    With ``cond_dim`` set, a global embedding shifts and scales both norms.
    """

    def __init__(self, dim: int, heads: int, with_ctx: bool = False, cond_dim: int | None = None):
        super().__init__()
        self.norm1 = RMSNorm(dim)
        self.attn = Attention(dim, heads, with_ctx)
        self.norm2 = RMSNorm(dim)
        self.fc1 = LoRALinear(dim, 4 * dim)
        self.fc2 = LoRALinear(4 * dim, dim)
        self.mod = None
        if cond_dim is not None:
            self.mod = nn.Linear(cond_dim, 4 * dim)
            nn.init.zeros_(self.mod.weight)
            nn.init.zeros_(self.mod.bias)

    def forward(self, x, rope_x, ctx=None, rope_ctx=None, emb=None):
        h = self.norm1(x)
        h2_shift = h2_scale = None
        if self.mod is not None and emb is not None:
            s1, c1, h2_shift, h2_scale = self.mod(emb).unsqueeze(-2).chunk(4, dim=-1)
            h = h * (1 + c1) + s1
        a, ctx_a = self.attn(h, rope_x, ctx, rope_ctx)
        x = x + a
        if ctx_a is not None:
            ctx = ctx + ctx_a
        h = self.norm2(x)
        if h2_shift is not None:
            h = h * (1 + h2_scale) + h2_shift
        x = x + self.fc2(gelu(self.fc1(h)))
        return x, ctx

    def lora_layers(self):
        return [self.attn.q, self.attn.k, self.attn.v, self.attn.o, self.fc1, self.fc2]


# -- optimizer -------------------------------------------------------------------

class ParamStore:
    """Named trainable parameters plus AdamW moments."""

    def __init__(self, named_params: dict[str, torch.nn.Parameter]):
        self.params = dict(named_params)
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.step = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor], step: int):
        for k in self.params:
            self.m[k] = tensors[f"m.{k}"].to(self.params[k].dtype).clone()
            self.v[k] = tensors[f"v.{k}"].to(self.params[k].dtype).clone()
        self.step = step


@torch.no_grad()
def adamw_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               weight_decay: float = 0.0, eps: float = 1e-8, step: int | None = None) -> ParamStore:
    """One decoupled-weight-decay Adam update; ``step`` defaults to store.step + 1."""
    for name, p in store.params.items():
        if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
            raise NumericFailure(f"non-finite gradient in parameter {name!r}")
    t = store.step + 1 if step is None else step
    bc1 = 1 - beta1 ** t
    bc2 = 1 - beta2 ** t
    for name, p in store.params.items():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if weight_decay:
            p.mul_(1 - lr * weight_decay)
        m, v = store.m[name], store.v[name]
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))
    store.step = t
    return store


# -- gradient checking -----------------------------------------------------------

def grad_check(op, inputs: list[torch.Tensor], eps: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between autograd and central finite differences.

    ``op`` maps the input tensors to an output tensor; the scalar probed is
    sum(out * R) for a fixed random R. Inputs are promoted to float64 and every
    coordinate of every input is perturbed.
    """
    xs = [x.detach().to(torch.float64).clone().requires_grad_(True) for x in inputs]
    out = op(*xs)
    R = torch.randn(out.shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    analytic = torch.autograd.grad((out * R).sum(), xs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for x, a in zip(xs, analytic):
            a = torch.zeros_like(x) if a is None else a
            flat = x.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = (op(*xs) * R).sum().item()
                flat[i] = orig - eps
                fm = (op(*xs) * R).sum().item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                an = a.view(-1)[i].item()
                worst = max(worst, abs(an - num) / (abs(an) + abs(num) + 1e-8))
    return worst


class _Bound(nn.Module):
    def __init__(self, module, call):
        super().__init__()
        self.m = module
        self.call = call

    def forward(self, *args):
        return self.call(self.m, *args)


def module_grad_check(module: nn.Module, inputs: list[torch.Tensor], call=None, eps: float = 1e-5,
                      with_params: bool = True) -> float:
    """grad_check over a module's inputs and its trainable parameters.

    ``call(module, *inputs)`` must return a tensor; defaults to module(*inputs).
    The module is converted to float64 in place.
    """
    bound = _Bound(module.double(), call or (lambda m, *a: m(*a)))
    named = dict(bound.named_parameters())
    names = [n for n, p in named.items() if p.requires_grad] if with_params else []
    n_in = len(inputs)

    def op(*xs):
        return torch.func.functional_call(bound, dict(zip(names, xs[n_in:])), tuple(xs[:n_in]), strict=False)

    return grad_check(op, [*inputs, *(named[n] for n in names)], eps)


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, tensors: dict[str, torch.Tensor], metadata: dict | None = None) -> None:
    """Write a named-tensor container atomically (temp file + rename).

    Floating tensors are stored as little-endian float32, integer tensors as
    int64; ``metadata`` is JSON-encoded into the header.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = {}
    for k, t in tensors.items():
        t = t.detach().cpu()
        out[k] = (t.to(torch.float32) if t.is_floating_point() else t.to(torch.int64)).contiguous()
    meta = {"meta": json.dumps(metadata or {}, sort_keys=True)}
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        save_file(out, tmp, metadata=meta)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    from safetensors import safe_open

    tensors = load_file(str(path))
    with safe_open(str(path), framework="pt") as f:
        meta = json.loads((f.metadata() or {}).get("meta", "{}"))
    return tensors, meta
