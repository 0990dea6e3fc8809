"""Offline residual quantization of compressed latent frames.

Each stage has a k-means codebook fitted on the residual left by earlier
stages. Optionally a small per-stage MLP adapts every candidate codeword to
the running reconstruction (cw + mlp([recon, cw])), in the spirit of
implicit neural codebooks. Encoding is greedy or beam search over stages,
scoring a pre-selected candidate set per stage.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import torch
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning
from torch import nn

from .errors import InvalidArgument
from .nn import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class QuantizerConfig:
    M: int = 20
    log2K: int = 10
    adapters: bool = True
    hidden: int = 64
    candidates: int = 16
    adapter_epochs: int = 4
    adapter_lr: float = 1e-3
    batch_frames: int = 8000
    kmeans_iters: int = 30
    seed: int = 0

    @property
    def K(self) -> int:
        return 1 << self.log2K


@dataclass
class CodeGrid:
    codes: np.ndarray  # M x T' integers in [0, K)
    K: int
    frame_rate: Fraction = Fraction(1)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 2:
            raise InvalidArgument("codes must be an M x T' grid")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.K):
            raise InvalidArgument(f"codes must lie in [0, {self.K})")

    @property
    def M(self) -> int:
        return self.codes.shape[0]


class StageAdapter(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(2 * dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, recon, cw):
        recon = recon.expand(*cw.shape[:-1], recon.shape[-1])
        return cw + self.fc2(torch.nn.functional.gelu(self.fc1(torch.cat([recon, cw], dim=-1))))


@dataclass
class QuantizerModel:
    codebooks: torch.Tensor  # M x K x D
    adapters: list = field(default_factory=list)  # per stage: StageAdapter or None
    candidates: int = 16
    stage_mse: list = field(default_factory=list)

    def __post_init__(self):
        if self.codebooks.dim() != 3 or min(self.codebooks.shape) < 1:
            raise InvalidArgument("codebooks must be a non-empty M x K x D tensor")
        if not torch.all(torch.isfinite(self.codebooks)):
            raise InvalidArgument("codebooks contain non-finite entries")
        if not self.adapters:
            self.adapters = [None] * self.M

    @property
    def M(self) -> int:
        return self.codebooks.shape[0]

    @property
    def K(self) -> int:
        return self.codebooks.shape[1]

    @property
    def D(self) -> int:
        return self.codebooks.shape[2]

    def codeword(self, m: int, recon: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
        """Stage-m codewords for code indices ``idx`` given running reconstruction(s)."""
        cw = self.codebooks[m][idx]
        ad = self.adapters[m]
        if ad is None:
            return cw
        with torch.no_grad():
            return ad(recon.unsqueeze(-2) if cw.dim() > recon.dim() else recon, cw)

    # -- persistence --------------------------------------------------------------
    def save(self, path, extra_meta: dict | None = None):
        tensors = {"codebooks": self.codebooks}
        on = []
        for m, ad in enumerate(self.adapters):
            if ad is not None:
                on.append(m)
                for k, v in ad.state_dict().items():
                    tensors[f"adapter.{m}.{k}"] = v
        hidden = next((ad.fc1.out_features for ad in self.adapters if ad is not None), 0)
        meta = {"M": self.M, "K": self.K, "D": self.D, "adapter_stages": on, "hidden": hidden,
                "candidates": self.candidates, "stage_mse": self.stage_mse, **(extra_meta or {})}
        save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "QuantizerModel":
        tensors, meta = load_checkpoint(path)
        adapters = [None] * meta["M"]
        for m in meta["adapter_stages"]:
            ad = StageAdapter(meta["D"], meta["hidden"])
            ad.load_state_dict({k.split(".", 2)[2]: v for k, v in tensors.items() if k.startswith(f"adapter.{m}.")})
            adapters[m] = ad
        return cls(tensors["codebooks"], adapters, meta["candidates"], meta.get("stage_mse", []))


# -- training -----------------------------------------------------------------------

def _kmeans(x: np.ndarray, K: int, seed: int, iters: int) -> np.ndarray:
    """k-means++ / Lloyd centroids; zero vectors fill slots beyond the distinct count."""
    distinct = np.unique(x, axis=0)
    k = min(K, len(distinct))
    centers = np.zeros((K, x.shape[1]), dtype=np.float64)
    if k == 0:
        return centers
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=iters, random_state=seed).fit(x)
    C = km.cluster_centers_
    # final M-step so each centre is the exact mean of its nearest-assigned points
    labels = _nearest(x, C)
    for j in range(k):
        sel = labels == j
        if np.any(sel):
            C[j] = x[sel].mean(axis=0)
    centers[:k] = C
    return centers


def _nearest(x: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ C.T + (C * C).sum(1)[None, :]
    return np.argmin(d, axis=1)


def train_codebooks(frames, M: int | None = None, K: int | None = None, cfg: QuantizerConfig | None = None,
                    dtype=torch.float32) -> QuantizerModel:
    """Fit M stages of K codewords on the residuals of ``frames`` [N, D].

    Stage distortions (training MSE after each stage) are stored on the model
    and are non-increasing: an adapter that would raise its stage's MSE is
    dropped for that stage.
    """
    cfg = cfg or QuantizerConfig()
    M = cfg.M if M is None else M
    K = cfg.K if K is None else K
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or M < 1 or K < 1:
        raise InvalidArgument("frames must be [N, D]; M, K >= 1")
    n_distinct = len(np.unique(x, axis=0))
    if n_distinct < K:
        log.warning("only %d distinct frames; reducing K from %d", n_distinct, K)
        K = n_distinct
    target = torch.as_tensor(x, dtype=dtype)
    recon = torch.zeros_like(target)
    books, adapters, mse = [], [], []
    prev = float(target.pow(2).mean())
    for m in range(M):
        resid = (target - recon).to(torch.float64).numpy()
        C = torch.as_tensor(_kmeans(resid, K, seed=cfg.seed * 1000 + m, iters=cfg.kmeans_iters), dtype=dtype)
        books.append(C)
        ad = None
        if cfg.adapters:
            ad = _fit_adapter(C, recon, target, cfg, dtype, seed=cfg.seed * 1000 + m)
        partial = QuantizerModel(torch.stack(books), [*adapters, ad], cfg.candidates)
        new = recon + _greedy_stage(partial, m, recon, target)
        err = float((target - new).pow(2).mean())
        if ad is not None and err > prev:
            log.info("stage %d adapter raised MSE (%.3g > %.3g); using plain codewords", m, err, prev)
            ad = None
            partial.adapters[m] = None
            new = recon + _greedy_stage(partial, m, recon, target)
            err = float((target - new).pow(2).mean())
        adapters.append(ad)
        recon = new
        mse.append(err)
        prev = err
    return QuantizerModel(torch.stack(books), adapters, cfg.candidates, mse)


def _candidates(C: torch.Tensor, resid: torch.Tensor, A: int) -> torch.Tensor:
    """Indices [..., A] of the A base codewords nearest to resid, ascending by index."""
    K = C.shape[0]
    if A >= K:
        return torch.arange(K).expand(*resid.shape[:-1], K)
    d = (resid * resid).sum(-1, keepdim=True) - 2 * resid @ C.T + (C * C).sum(-1)
    idx = torch.topk(d, A, dim=-1, largest=False).indices
    return torch.sort(idx, dim=-1).values


def _greedy_stage(q: QuantizerModel, m: int, recon, target, chunk: int = 4096):
    out = []
    for s in range(0, len(target), chunk):
        r, t = recon[s:s + chunk], target[s:s + chunk]
        idx = _candidates(q.codebooks[m], t - r, q.candidates)
        cw = q.codeword(m, r, idx)
        best = torch.argmin((t.unsqueeze(-2) - r.unsqueeze(-2) - cw).pow(2).sum(-1), dim=-1)
        out.append(cw[torch.arange(len(t)), best])
    return torch.cat(out) if out else torch.zeros_like(target)


def _fit_adapter(C, recon, target, cfg: QuantizerConfig, dtype, seed: int) -> StageAdapter:
    torch.manual_seed(seed)
    ad = StageAdapter(C.shape[1], cfg.hidden).to(dtype)
    opt = torch.optim.Adam(ad.parameters(), lr=cfg.adapter_lr)
    g = torch.Generator().manual_seed(seed)
    N = len(target)
    resid = target - recon
    idx_all = _candidates(C, resid, cfg.candidates)
    for _ in range(cfg.adapter_epochs):
        perm = torch.randperm(N, generator=g)
        for s in range(0, N, cfg.batch_frames):
            b = perm[s:s + cfg.batch_frames]
            r, res, idx = recon[b], resid[b], idx_all[b]
            cw = ad(r.unsqueeze(-2), C[idx])
            err = (res.unsqueeze(-2) - cw).pow(2).sum(-1)
            best = torch.argmin(err.detach(), dim=-1)
            loss = err[torch.arange(len(b)), best].mean() / C.shape[1]
            opt.zero_grad()
            loss.backward()
            opt.step()
    return ad


# -- encoding ---------------------------------------------------------------------

def _frames_of(z):
    """Accept CompressedLatent / array [D, T'] and return a torch [T', D] view."""
    data = getattr(z, "data", z)
    return torch.as_tensor(np.asarray(data)).T


def quantize_frames(x: torch.Tensor, q: QuantizerModel, beam: int = 1, chunk: int = 2048) -> torch.Tensor:
    """Codes [N, M] for frames x [N, D] by beam search over stages."""
    if x.shape[-1] != q.D:
        raise InvalidArgument(f"frame dim {x.shape[-1]} != quantizer dim {q.D}")
    if beam < 1:
        raise InvalidArgument("beam width must be >= 1")
    x = x.to(q.codebooks.dtype)
    out = []
    for s in range(0, len(x), chunk):
        t = x[s:s + chunk]
        n = len(t)
        recon = torch.zeros(n, 1, q.D, dtype=x.dtype)
        codes = torch.zeros(n, 1, 0, dtype=torch.long)
        for m in range(q.M):
            b = recon.shape[1]
            idx = _candidates(q.codebooks[m], t.unsqueeze(1) - recon, q.candidates)  # n, b, A
            cw = q.codeword(m, recon, idx)  # n, b, A, D
            new = recon.unsqueeze(2) + cw
            err = (t[:, None, None, :] - new).pow(2).sum(-1).reshape(n, -1)
            keep = min(beam, err.shape[1])
            order = torch.argsort(err, dim=1, stable=True)[:, :keep]
            A = idx.shape[-1]
            src_beam, src_cand = order // A, order % A
            rows = torch.arange(n)[:, None]
            recon = new.reshape(n, b * A, q.D)[rows, order]
            chosen = idx.reshape(n, b * A)[rows, order]
            codes = torch.cat([codes[rows, src_beam], chosen.unsqueeze(-1)], dim=-1)
        out.append(codes[:, 0])
    return torch.cat(out) if out else torch.zeros(0, q.M, dtype=torch.long)


def dequantize_frames(codes: torch.Tensor, q: QuantizerModel, m_use: int | None = None) -> torch.Tensor:
    m_use = q.M if m_use is None else m_use
    if not 1 <= m_use <= q.M:
        raise InvalidArgument(f"m_use={m_use} outside [1, {q.M}]")
    codes = torch.as_tensor(codes, dtype=torch.long)
    recon = torch.zeros(codes.shape[0], q.D, dtype=q.codebooks.dtype)
    for m in range(m_use):
        recon = recon + q.codeword(m, recon, codes[:, m])
    return recon


def quantize(z, q: QuantizerModel, beam: int = 1):
    """Returns (CodeGrid, z_q as a D x T' array)."""
    from .encoder import CompressedLatent

    codes = quantize_frames(_frames_of(z), q, beam)
    zq = dequantize_frames(codes, q)
    rate = getattr(z, "frame_rate", Fraction(1))
    return CodeGrid(codes.T.numpy(), q.K, rate), CompressedLatent(zq.T.numpy(), rate)


def dequantize(codes: CodeGrid, q: QuantizerModel, m_use: int | None = None):
    from .encoder import CompressedLatent

    if codes.M > q.M:
        raise InvalidArgument(f"code grid has {codes.M} stages, quantizer only {q.M}")
    m_use = codes.M if m_use is None else m_use
    if not 1 <= m_use <= codes.M:
        raise InvalidArgument(f"m_use={m_use} outside [1, {codes.M}]")
    zq = dequantize_frames(torch.as_tensor(codes.codes.T), q, m_use)
    return CompressedLatent(zq.T.numpy(), codes.frame_rate)


# -- rate arithmetic -------------------------------------------------------------------

def _exact(f) -> Fraction:
    if isinstance(f, float):
        return Fraction(f).limit_denominator(1_000_000)
    return Fraction(f)


def bitrate(M: int, K: int, f) -> Fraction:
    """M * log2(K) * f bits per second, exactly."""
    if K < 1 or K & (K - 1):
        raise InvalidArgument(f"K={K} is not a power of two")
    return M * (K.bit_length() - 1) * _exact(f)


def compression_ratio(sample_rate, D: int, f) -> Fraction:
    """Raw samples per second over transmitted reals per second."""
    return Fraction(sample_rate) / (D * _exact(f))


def select_finetune_M(K_bits: int) -> int:
    """Codebook count giving roughly 100 bits of vocabulary per frame."""
    return {10: 10, 12: 8}.get(K_bits, max(1, round(100 / K_bits)))


def codebook_bits_for_stride(t: int) -> int:
    return 12 if t >= 20 else 10


def log2_exact(K: int) -> int:
    if K < 1 or K & (K - 1):
        raise InvalidArgument(f"K={K} is not a power of two")
    return int(math.log2(K))
