"""Waveform side of the codec: synthetic sound effects, WAV I/O and the
invertible lapped transform that produces the latent grid.

The transform is an orthonormal MDCT with a sine window (window = 2 * hop).
Frames are laid out circularly: block k of the hop-sized signal blocks is
covered by frames k and k+1 (mod T), so T = ceil(len / hop) frames carry
exactly len coefficients and the analysis matrix is orthogonal.
"""
from __future__ import annotations

import logging
import math
import wave
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import FormatError, InvalidArgument, UnsupportedEncoding

log = logging.getLogger(__name__)

SAMPLE_RATE = 12800
KINDS = ("impact", "chirp", "noise_burst", "am_texture", "mixture")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InvalidArgument("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidArgument("waveform contains non-finite samples")

    @property
    def duration(self) -> Fraction:
        return Fraction(len(self.samples), self.sample_rate)

    def __len__(self):
        return len(self.samples)


@dataclass
class FrontendConfig:
    window_len: int = 256
    hop: int = 128
    sample_rate: int = SAMPLE_RATE
    channel_scale: np.ndarray | None = None

    def __post_init__(self):
        if self.window_len != 2 * self.hop:
            raise InvalidArgument("window_len must equal 2 * hop for perfect reconstruction")
        if self.channel_scale is None:
            self.channel_scale = np.ones(self.hop)
        self.channel_scale = np.asarray(self.channel_scale, dtype=np.float64)
        if self.channel_scale.shape != (self.hop,) or np.any(self.channel_scale <= 0):
            raise InvalidArgument("channel_scale must hold `hop` positive entries")

    @property
    def channels(self) -> int:
        return self.hop

    @property
    def latent_rate(self) -> Fraction:
        return Fraction(self.sample_rate, self.hop)


@dataclass
class LatentTensor:
    data: np.ndarray  # C x T
    latent_rate: Fraction = Fraction(SAMPLE_RATE, 128)
    num_samples: int | None = field(default=None)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]


# -- synthetic corpus ---------------------------------------------------------

def _envelope(n: int, sr: int, attack: float, release: float) -> np.ndarray:
    env = np.ones(n)
    a = max(1, int(attack * sr))
    r = max(1, int(release * sr))
    env[:a] *= np.linspace(0.0, 1.0, a)
    env[n - r:] *= np.linspace(1.0, 0.0, r)
    return env


def _impact(rng, n, sr):
    t = np.arange(n) / sr
    onset = rng.uniform(0.0, 0.3) * t[-1]
    tau = rng.uniform(0.03, 0.3)
    f0 = rng.uniform(80.0, 2000.0)
    ratios = [1.0, *rng.uniform(1.5, 4.5, size=rng.integers(1, 4))]
    tt = np.clip(t - onset, 0.0, None)
    y = np.zeros(n)
    for i, r in enumerate(ratios):
        f = min(f0 * r, 0.45 * sr)
        y += (0.6 ** i) * np.sin(2 * np.pi * f * tt + rng.uniform(0, 2 * np.pi))
    y *= np.exp(-tt / tau) * (t >= onset)
    click = rng.standard_normal(n) * np.exp(-tt / 0.004) * (t >= onset)
    return y + 0.3 * click


def _chirp(rng, n, sr):
    t = np.arange(n) / sr
    f_lo = rng.uniform(100.0, 1000.0)
    f_hi = rng.uniform(2000.0, 5000.0)
    y = signal.chirp(t, f0=f_lo, t1=t[-1], f1=f_hi, method="linear", phi=rng.uniform(0, 360))
    return y * _envelope(n, sr, 0.01, 0.01)


def _noise_burst(rng, n, sr):
    lo = rng.uniform(50.0, 2000.0)
    hi = min(lo * rng.uniform(1.5, 6.0), 0.45 * sr)
    sos = signal.butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
    y = signal.sosfilt(sos, rng.standard_normal(n))
    t = np.arange(n) / sr
    center = rng.uniform(0.2, 0.8) * t[-1]
    width = rng.uniform(0.05, 0.3)
    return y * np.exp(-0.5 * ((t - center) / width) ** 2)


def _am_texture(rng, n, sr):
    t = np.arange(n) / sr
    f = rng.uniform(200.0, 3000.0)
    rate = rng.uniform(2.0, 20.0)
    depth = rng.uniform(0.3, 1.0)
    carrier = np.sin(2 * np.pi * f * t) + 0.3 * np.sin(2 * np.pi * min(2 * f, 0.45 * sr) * t)
    mod = 1.0 - depth * 0.5 * (1.0 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    return carrier * mod * _envelope(n, sr, 0.02, 0.02)


_GENERATORS = {
    "impact": _impact,
    "chirp": _chirp,
    "noise_burst": _noise_burst,
    "am_texture": _am_texture,
}


def synth_clip(kind: str, duration_s: float, seed: int, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Deterministic toy sound effect of the given kind, peak-normalized to <= 0.99."""
    if kind not in KINDS:
        raise InvalidArgument(f"unknown clip kind {kind!r}; expected one of {KINDS}")
    if not duration_s > 0:
        raise InvalidArgument("duration_s must be positive")
    n = int(round(duration_s * sample_rate))
    if n < 1:
        raise InvalidArgument("duration too short for the sample rate")
    rng = np.random.default_rng([KINDS.index(kind), int(seed)])
    if kind == "mixture":
        parts = rng.choice(list(_GENERATORS), size=rng.integers(2, 4), replace=True)
        y = np.zeros(n)
        for p in parts:
            part = _GENERATORS[p](rng, n, sample_rate)
            y += rng.uniform(0.3, 1.0) * part / (np.max(np.abs(part)) + 1e-12)
    else:
        y = _GENERATORS[kind](rng, n, sample_rate)
    peak = np.max(np.abs(y))
    if peak > 0:
        y = y * (rng.uniform(0.3, 0.99) / peak)
    return Waveform(y, sample_rate)


# -- WAV I/O -------------------------------------------------------------------

def wav_write(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate))
        f.writeframes(pcm.tobytes())


def wav_read(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate, n = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            raw = f.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: malformed WAV ({exc})") from exc
    if channels != 1:
        raise UnsupportedEncoding(f"{path}: {channels} channels, only mono is supported")
    if width != 2:
        raise UnsupportedEncoding(f"{path}: {8 * width}-bit samples, only 16-bit PCM is supported")
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise FormatError(f"{path}: no audio frames")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


# -- lapped transform ------------------------------------------------------------

def _mdct_basis(hop: int) -> tuple[np.ndarray, np.ndarray]:
    n = np.arange(2 * hop)
    k = np.arange(hop)
    window = np.sin(np.pi * (n + 0.5) / (2 * hop))
    basis = math.sqrt(2.0 / hop) * np.cos(np.pi / hop * (n[None, :] + 0.5 + hop / 2) * (k[:, None] + 0.5))
    return window, basis


def _frames(T: int) -> np.ndarray:
    # frame k spans blocks (k-1 mod T, k)
    k = np.arange(T)
    return np.stack([(k - 1) % T, k], axis=1)


def frontend_encode(w: Waveform, cfg: FrontendConfig, scaled: bool = True) -> LatentTensor:
    hop = cfg.hop
    if len(w) < cfg.window_len:
        raise InvalidArgument(f"waveform has {len(w)} samples, need at least {cfg.window_len}")
    if w.sample_rate != cfg.sample_rate:
        raise InvalidArgument(f"sample rate {w.sample_rate} != frontend rate {cfg.sample_rate}")
    T = -(-len(w) // hop)
    x = np.zeros(T * hop)
    x[: len(w)] = w.samples
    blocks = x.reshape(T, hop)
    segs = blocks[_frames(T)].reshape(T, 2 * hop)
    window, basis = _mdct_basis(hop)
    coeffs = (segs * window) @ basis.T  # T x C
    data = coeffs.T
    if scaled:
        data = data / cfg.channel_scale[:, None]
    return LatentTensor(data, cfg.latent_rate, len(w))


def frontend_decode(x0: LatentTensor, cfg: FrontendConfig, scaled: bool = True, clip: bool = True) -> Waveform:
    hop = cfg.hop
    data = np.asarray(x0.data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] != cfg.channels:
        raise InvalidArgument(f"latent shape {data.shape} does not match {cfg.channels} channels")
    T = data.shape[1]
    if T < 2:
        raise InvalidArgument("need at least 2 latent frames")
    if scaled:
        data = data * cfg.channel_scale[:, None]
    window, basis = _mdct_basis(hop)
    segs = (data.T @ basis) * window  # T x 2hop
    out = np.zeros((T, hop))
    idx = _frames(T)
    np.add.at(out, idx[:, 0], segs[:, :hop])
    np.add.at(out, idx[:, 1], segs[:, hop:])
    y = out.reshape(-1)
    if x0.num_samples is not None:
        y = y[: x0.num_samples]
    if clip:
        y = np.clip(y, -1.0, 1.0)
    return Waveform(y, cfg.sample_rate)


def fit_channel_scale(corpus, cfg: FrontendConfig, sigma_data: float = 0.5) -> np.ndarray:
    """Per-channel divisors that bring the corpus latent std to ``sigma_data``.

    Clips whose latent is identically zero are skipped so that silence does
    not dilute the statistics.
    """
    corpus = list(corpus)
    if len(corpus) < 16:
        raise InvalidArgument(f"need at least 16 clips to fit channel scales, got {len(corpus)}")
    raw = FrontendConfig(cfg.window_len, cfg.hop, cfg.sample_rate)
    lat = [frontend_encode(w, raw, scaled=False).data for w in corpus]
    lat = [x for x in lat if np.any(x != 0)]
    if not lat:
        log.warning("all clips are silent; channel scale left at 1")
        return np.ones(cfg.channels)
    std = np.concatenate(lat, axis=1).std(axis=1)
    scale = std / sigma_data
    dead = std == 0
    if np.any(dead):
        log.warning("channels %s are all-zero over the corpus; using scale 1", np.flatnonzero(dead).tolist())
        scale[dead] = 1.0
    return scale


def read_manifest(path) -> list[dict]:
    path = Path(path)
    rows = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        clip, kind, seed, dur = line.split(",")
        rows.append({"path": path.parent / clip, "kind": kind, "seed": int(seed), "duration_s": float(dur)})
    return rows
