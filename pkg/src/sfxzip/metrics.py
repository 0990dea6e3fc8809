"""Objective metrics: Si-SDR, a fixed surrogate audio embedder, and
Fréchet / kernel distances between embedding sets.

Absolute values are only comparable between runs of this package; the
embedder is a deterministic log-mel summary, not a pretrained network.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import InvalidArgument
from .frontend import Waveform

log = logging.getLogger(__name__)

SI_SDR_CAP = 100.0
EMBED_SEED = 20250917  # fixes the surrogate projection; changing it changes every metric


def si_sdr(ref: Waveform, est: Waveform) -> float:
    r = np.asarray(getattr(ref, "samples", ref), dtype=np.float64)
    e = np.asarray(getattr(est, "samples", est), dtype=np.float64)
    n = max(len(r), len(e))
    r = np.pad(r, (0, n - len(r)))
    e = np.pad(e, (0, n - len(e)))
    rr = np.dot(r, r)
    if rr == 0:
        raise InvalidArgument("reference signal is all zeros")
    target = (np.dot(e, r) / rr) * r
    noise = target - e
    num, den = np.dot(target, target), np.dot(noise, noise)
    if den == 0 or num / den > 10 ** (SI_SDR_CAP / 10):
        return SI_SDR_CAP
    if num == 0:
        return -SI_SDR_CAP
    return float(10 * np.log10(num / den))


def _mel_filterbank(n_bands: int, n_fft: int, sr: int, fmin: float = 40.0) -> np.ndarray:
    def hz2mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel2hz(m):
        return 700.0 * (10 ** (m / 2595.0) - 1.0)

    edges = mel2hz(np.linspace(hz2mel(fmin), hz2mel(sr / 2), n_bands + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sr)
    fb = np.zeros((n_bands, len(freqs)))
    for b in range(n_bands):
        lo, mid, hi = edges[b : b + 3]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[b] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


@dataclass
class SurrogateEmbedder:
    """Log-mel band energies, pooled over time (mean + std), projected to 32 dims.

    The band-mean part is centered across bands, so a global gain change
    leaves the embedding (nearly) unchanged.
    """

    sample_rate: int = 12800
    n_bands: int = 24
    window: int = 512
    hop: int = 256
    dim: int = 32
    seed: int = EMBED_SEED
    floor: float = 1e-10
    fb: np.ndarray = field(init=False, repr=False)
    proj: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.fb = _mel_filterbank(self.n_bands, self.window, self.sample_rate)
        P = np.random.default_rng(self.seed).standard_normal((self.dim, 2 * self.n_bands))
        self.proj = P / np.linalg.norm(P, axis=1, keepdims=True)

    def band_features(self, w: Waveform) -> np.ndarray:
        x = np.asarray(getattr(w, "samples", w), dtype=np.float64)
        if len(x) < self.window:
            raise InvalidArgument(f"need at least {self.window} samples to embed, got {len(x)}")
        n = 1 + (len(x) - self.window) // self.hop
        idx = np.arange(self.window)[None, :] + self.hop * np.arange(n)[:, None]
        spec = np.abs(np.fft.rfft(x[idx] * np.hanning(self.window), axis=1)) ** 2
        logmel = np.log(spec @ self.fb.T + self.floor)
        mean = logmel.mean(axis=0)
        return np.concatenate([mean - mean.mean(), logmel.std(axis=0)])

    def __call__(self, w: Waveform) -> np.ndarray:
        return self.proj @ self.band_features(w)


def embed(w: Waveform, e: SurrogateEmbedder | None = None) -> np.ndarray:
    return (e or SurrogateEmbedder())(w)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))


@dataclass
class EmbeddingStats:
    mu: np.ndarray
    sigma: np.ndarray
    count: int

    @classmethod
    def from_embeddings(cls, X) -> "EmbeddingStats":
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if len(X) < 2:
            raise InvalidArgument("need at least two embeddings for statistics")
        return cls(X.mean(axis=0), np.atleast_2d(np.cov(X, rowvar=False)), len(X))


EIG_TOL = 1e-10  # eigenvalues below this fraction of the largest are treated as 0


def _clamp(w: np.ndarray) -> np.ndarray:
    top = np.max(np.abs(w)) if w.size else 0.0
    return np.where(w > EIG_TOL * top, w, 0.0)


def _psd(S: np.ndarray) -> np.ndarray:
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    return (V * _clamp(w)) @ V.T


def frechet_distance(a: EmbeddingStats, b: EmbeddingStats) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)."""
    if a.mu.shape != b.mu.shape:
        raise InvalidArgument(f"embedding dims differ: {a.mu.shape} vs {b.mu.shape}")
    Sa, Sb = _psd(np.atleast_2d(a.sigma)), _psd(np.atleast_2d(b.sigma))
    # symmetric form: sqrt(Sa) Sb sqrt(Sa) has the same spectrum as Sa Sb
    wa, Va = np.linalg.eigh(Sa)
    root_a = (Va * np.sqrt(_clamp(wa))) @ Va.T
    inner = root_a @ Sb @ root_a
    tr_cross = np.sum(np.sqrt(_clamp(np.linalg.eigvalsh(0.5 * (inner + inner.T)))))
    d = np.sum((a.mu - b.mu) ** 2) + np.trace(Sa) + np.trace(Sb) - 2 * tr_cross
    return float(max(d, 0.0))


def kernel_distance(X, Y, unbiased: bool = True) -> float:
    """Squared MMD with a Gaussian kernel, bandwidth = median pairwise distance."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    m, n = len(X), len(Y)
    if m < 2 or n < 2:
        raise InvalidArgument("kernel distance needs at least two samples per set")
    bw = float(np.median(pdist(np.vstack([X, Y]))))
    if not bw > 0:
        log.warning("degenerate kernel bandwidth; falling back to 1.0")
        bw = 1.0

    def k(a, b):
        return np.exp(-0.5 * cdist(a, b, "sqeuclidean") / bw ** 2)

    Kxx, Kyy, Kxy = k(X, X), k(Y, Y), k(X, Y)
    if unbiased:
        xx = (Kxx.sum() - np.trace(Kxx)) / (m * (m - 1))
        yy = (Kyy.sum() - np.trace(Kyy)) / (n * (n - 1))
    else:
        xx, yy = Kxx.mean(), Kyy.mean()
    return float(xx + yy - 2 * Kxy.mean())
