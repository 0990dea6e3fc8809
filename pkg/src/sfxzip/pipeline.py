"""End-to-end codec: waveform -> latents -> z (-> codes) -> conditioning ->
Heun sampling -> waveform, plus file-level encode/decode and the
evaluation sweep."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from .bitstream import SpzHeader, read_spz, write_spz
from .config import RunConfig
from .corpus import LatentCorpus
from .denoiser import build_conditioning, denoise
from .errors import InvalidArgument, MissingCheckpoint
from .frontend import FrontendConfig, LatentTensor, Waveform, frontend_decode, frontend_encode, wav_read, wav_write
from .metrics import EmbeddingStats, SurrogateEmbedder, cosine, frechet_distance, kernel_distance, si_sdr
from .quantizer import (
    CodeGrid, QuantizerModel, bitrate, dequantize_frames, quantize_frames,
)
from .sampler import build_schedule, heun_sample
from .seeding import torch_substream
from .training import (
    CKPT, Models, file_hash, finetune_M, load_frontend, load_models, load_quantizer, validation_loss,
)

log = logging.getLogger(__name__)

CONFIG_FILE = "config.yaml"


@dataclass
class Codec:
    cfg: RunConfig
    frontend: FrontendConfig
    models: Models
    quantizer: QuantizerModel | None = None
    hashes: dict = field(default_factory=dict)

    @classmethod
    def load(cls, run_dir, cfg: RunConfig | None = None, adapters: str = "auto", quantizer: bool = True) -> "Codec":
        """Assemble a codec from a run directory (config, frontend scale, models, quantizer)."""
        run_dir = Path(run_dir)
        if cfg is None:
            p = run_dir / CONFIG_FILE
            if not p.exists():
                raise MissingCheckpoint(f"run config missing: expected {p}")
            cfg = RunConfig.load(p)
        if adapters == "auto":
            adapters = "3" if (run_dir / CKPT["3"]).exists() else "1"
        models = load_models(run_dir, cfg, adapters)
        q = load_quantizer(run_dir) if quantizer else None
        hashes = {k: file_hash(run_dir / CKPT[k]) for k in ("pretrain", "1", "q", "3") if (run_dir / CKPT[k]).exists()}
        hashes["adapters"] = adapters
        return cls(cfg, load_frontend(run_dir, cfg), models, q, hashes)

    @property
    def t(self) -> int:
        return self.models.encoder.cfg.t

    @property
    def log2K(self) -> int:
        if self.quantizer is None:
            raise MissingCheckpoint("this codec has no quantizer")
        return max(1, math.ceil(math.log2(self.quantizer.K)))

    def frame_rate(self) -> Fraction:
        return self.frontend.latent_rate / self.t


# -- latent-level pieces -----------------------------------------------------------------

def _check_geometry(codec: Codec):
    enc, dec = codec.models.encoder.cfg, codec.models.denoiser.cfg
    if enc.channels != codec.frontend.channels or dec.channels != codec.frontend.channels:
        raise InvalidArgument("frontend, encoder and decoder disagree on the channel count")
    if dec.cond_dim != enc.out_dim:
        raise InvalidArgument(f"decoder expects {dec.cond_dim}-dim conditioning, encoder gives {enc.out_dim}")
    if codec.quantizer is not None and codec.quantizer.D != enc.out_dim:
        raise InvalidArgument(f"quantizer dim {codec.quantizer.D} != encoder output {enc.out_dim}")


@torch.no_grad()
def encode_latents(codec: Codec, x0: torch.Tensor) -> torch.Tensor:
    """z [B, D, T'] for scaled latents x0 [B, C, T]."""
    return codec.models.encoder(x0)


def quantize_latents(codec: Codec, z: torch.Tensor, m_use: int | None = None):
    """(codes [B, T', M], z_q [B, D, T'] from the first m_use stages)."""
    q = codec.quantizer
    if q is None:
        raise MissingCheckpoint("no quantizer loaded")
    B, D, Tp = z.shape
    codes = quantize_frames(z.transpose(1, 2).reshape(-1, D), q)
    zq = dequantize_frames(codes, q, m_use).to(z.dtype)
    return codes.reshape(B, Tp, q.M), zq.reshape(B, Tp, D).transpose(1, 2)


@torch.no_grad()
def sample_latents(codec: Codec, z: torch.Tensor, T: int, steps: int | None = None, seed: int = 0,
                   clip_offset: int = 0) -> torch.Tensor:
    """Heun-sample x0 [B, C, T] conditioned on z [B, D, T']; clip i uses noise stream (seed, i + offset)."""
    _check_geometry(codec)
    den = codec.models.denoiser
    B = z.shape[0]
    C = codec.frontend.channels
    cond = build_conditioning(z, den.cond_proj, codec.t, T, None, True)
    sc = codec.cfg.sampler
    sched = build_schedule(steps or sc.steps, sc.sigma_min, sc.sigma_max, sc.rho)
    noise = torch.stack([torch.randn((C, T), generator=torch_substream(seed, "sampler", clip_offset + i),
                                     dtype=torch.float64) for i in range(B)])
    dtype = next(den.parameters()).dtype
    p = codec.cfg.train.edm
    return heun_sample(lambda x, s: denoise(x, s, cond, den, p), None, sched, noise=noise, dtype=dtype)


def _sidecar(path: Path, **kv):
    path.write_text("".join(f"{k}={v}\n" for k, v in kv.items()))


def reconstruct(w: Waveform, codec: Codec, m_use: int | None = None, steps: int | None = None, seed: int = 0,
                quantized: bool | None = None, sidecar=None) -> Waveform:
    """Continuous (no quantizer / quantized=False) or discrete reconstruction of one clip."""
    x0 = frontend_encode(w, codec.frontend)
    T = x0.frames
    if T < codec.t:
        raise InvalidArgument(f"clip has {T} latent frames, fewer than the stride t={codec.t}")
    dtype = next(codec.models.encoder.parameters()).dtype
    z = encode_latents(codec, torch.as_tensor(x0.data, dtype=dtype)[None])
    quantized = codec.quantizer is not None if quantized is None else quantized
    if quantized:
        m_use = m_use or finetune_M(codec.cfg, codec.quantizer)
        _, z = quantize_latents(codec, z, m_use)
    x = sample_latents(codec, z, T, steps, seed)[0]
    out = frontend_decode(LatentTensor(x.double().numpy(), x0.latent_rate, x0.num_samples), codec.frontend)
    if sidecar is not None:
        sc = codec.cfg.sampler
        _sidecar(Path(sidecar), seed=seed, steps=steps or sc.steps, sigma_max=sc.sigma_max, sigma_min=sc.sigma_min,
                 rho=sc.rho, m_use=m_use if quantized else "continuous",
                 **{f"ckpt_{k}": v for k, v in codec.hashes.items()})
    return out


# -- files -------------------------------------------------------------------------------

def encode_file(wav_path, codec: Codec, m_use: int | None, out_path, seed: int = 0) -> dict:
    """Write a .spz for one WAV; returns a plain summary dict."""
    q = codec.quantizer
    if q is None:
        raise MissingCheckpoint("encoding needs a trained quantizer")
    m_use = q.M if m_use is None else m_use
    if not 1 <= m_use <= q.M:
        raise InvalidArgument(f"m_use={m_use} outside [1, {q.M}]")
    _check_geometry(codec)
    w = wav_read(wav_path)
    x0 = frontend_encode(w, codec.frontend)
    dtype = next(codec.models.encoder.parameters()).dtype
    z = encode_latents(codec, torch.as_tensor(x0.data, dtype=dtype)[None])
    codes, _ = quantize_latents(codec, z, m_use)
    grid = CodeGrid(codes[0, :, :m_use].T.numpy(), 1 << codec.log2K, codec.frame_rate())
    enc = codec.models.encoder.cfg
    hdr = SpzHeader(codec.frontend.sample_rate, codec.frontend.hop, codec.frontend.window_len, enc.channels, enc.c,
                    enc.t, enc.out_dim, m_use, codec.log2K, grid.codes.shape[1], seed, len(w))
    size = write_spz(out_path, hdr, grid)
    achieved = Fraction(hdr.payload_bits) / w.duration
    return {"path": str(out_path), "M": m_use, "K": 1 << codec.log2K, "log2K": codec.log2K, "t": enc.t,
            "frame_rate": codec.frame_rate(), "frames": hdr.num_frames, "payload_bits": hdr.payload_bits,
            "bytes": size, "duration_s": w.duration, "bitrate": achieved,
            "nominal_bitrate": bitrate(m_use, 1 << codec.log2K, codec.frame_rate())}


def _check_header(h: SpzHeader, codec: Codec):
    enc = codec.models.encoder.cfg
    got = (h.sample_rate, h.hop, h.window_len, h.C, h.c, h.t, h.D)
    want = (codec.frontend.sample_rate, codec.frontend.hop, codec.frontend.window_len, enc.channels, enc.c, enc.t,
            enc.out_dim)
    if got != want:
        raise InvalidArgument(f"stream geometry {got} does not match checkpoints {want} "
                              "(sample_rate, hop, window, C, c, t, D)")
    if codec.quantizer is None or h.M > codec.quantizer.M or h.log2K != codec.log2K:
        raise InvalidArgument(f"stream uses M={h.M}, log2K={h.log2K}; quantizer cannot decode it")


def decode_file(spz_path, codec: Codec, steps: int | None = None, seed: int | None = None, out_path=None,
                sidecar: bool = True) -> Waveform:
    h, grid = read_spz(spz_path)
    _check_header(h, codec)
    if grid.codes.size and grid.codes.max() >= codec.quantizer.K:
        raise InvalidArgument("stream holds codes beyond the codebook size")
    seed = h.seed if seed is None else seed
    z = dequantize_frames(torch.as_tensor(grid.codes.T), codec.quantizer, h.M).T[None]
    dtype = next(codec.models.denoiser.parameters()).dtype
    n = h.num_samples or h.num_frames * h.t * h.hop
    T = -(-n // h.hop)
    if T // h.t != h.num_frames:
        raise InvalidArgument(f"{n} samples imply {T // h.t} frames but the stream holds {h.num_frames}")
    x = sample_latents(codec, z.to(dtype), T, steps, seed)[0]
    out = frontend_decode(LatentTensor(x.double().numpy(), codec.frontend.latent_rate, n), codec.frontend)
    if out_path is not None:
        wav_write(out_path, out)
        if sidecar:
            sc = codec.cfg.sampler
            _sidecar(Path(str(out_path) + ".log"), seed=seed, steps=steps or sc.steps, sigma_max=sc.sigma_max,
                     sigma_min=sc.sigma_min, rho=sc.rho, m_use=h.M,
                     **{f"ckpt_{k}": v for k, v in codec.hashes.items()})
    return out


# -- evaluation ----------------------------------------------------------------------------

COLUMNS = ("variant", "adapters", "t", "frame_rate", "m_use", "bitrate", "si_sdr", "frechet", "kernel",
           "cosine", "cosine_shuffled", "latent_mse", "val_loss")


@dataclass
class Variant:
    name: str
    m_use: int | None  # None = continuous
    adapters: str = "3"

    @classmethod
    def parse(cls, spec: str, default_adapters: str = "3") -> "Variant":
        """'continuous', 'discrete:10', optionally suffixed with '@1' or '@3' for the adapter set."""
        body, _, ad = spec.partition("@")
        ad = ad or default_adapters
        if ad not in ("1", "3"):
            raise InvalidArgument(f"adapter set must be 1 or 3, got {ad!r}")
        if body == "continuous":
            return cls(spec, None, ad)
        kind, _, m = body.partition(":")
        if kind != "discrete" or not m.isdigit():
            raise InvalidArgument(f"bad variant {spec!r}; use continuous or discrete:<m_use>[@1|@3]")
        return cls(spec, int(m), ad)


def _derangement(n: int) -> np.ndarray:
    return (np.arange(n) + 1) % n if n > 1 else np.arange(n)


def _fmt(v) -> str:
    if isinstance(v, Fraction):
        return str(v) if v.denominator != 1 else str(v.numerator)
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def eval_suite(run_dir, testset: LatentCorpus, variants: list[Variant], steps: int | None = None, seed: int = 0,
               sample: bool = True, out=None, chunk: int = 32) -> list[dict]:
    """One row per variant; see COLUMNS. Reconstructions use the class-free decoder."""
    run_dir = Path(run_dir)
    codecs = {}
    rows = []
    emb = SurrogateEmbedder()
    ref_emb = np.stack([emb(w) for w in testset.waves]) if sample else None
    for v in variants:
        if v.adapters not in codecs:
            codecs[v.adapters] = Codec.load(run_dir, adapters=v.adapters, quantizer=True)
        codec = codecs[v.adapters]
        q = codec.quantizer
        if v.m_use is not None and not 1 <= v.m_use <= q.M:
            raise InvalidArgument(f"variant {v.name}: m_use outside [1, {q.M}]")
        z = torch.cat([encode_latents(codec, testset.x0[s:s + chunk]) for s in range(0, len(testset), chunk)])
        if v.m_use is None:
            zc, lat_mse, rate = z, 0.0, None
        else:
            _, zc = quantize_latents(codec, z, v.m_use)
            lat_mse = float((zc - z).double().pow(2).mean())
            rate = bitrate(v.m_use, 1 << codec.log2K, codec.frame_rate())
        row = {"variant": v.name, "adapters": v.adapters, "t": codec.t, "frame_rate": codec.frame_rate(),
               "m_use": v.m_use if v.m_use is not None else "inf", "bitrate": rate if rate is not None else "inf",
               "latent_mse": lat_mse, "val_loss": validation_loss(codec.models, testset, codec.cfg.train, z_cond=zc)}
        if sample:
            T = testset.x0.shape[-1]
            xs = torch.cat([sample_latents(codec, zc[s:s + chunk], T, steps, seed, clip_offset=s)
                            for s in range(0, len(testset), chunk)])
            recs = [frontend_decode(LatentTensor(x.double().numpy(), codec.frontend.latent_rate, len(w)),
                                    codec.frontend) for x, w in zip(xs, testset.waves)]
            rec_emb = np.stack([emb(r) for r in recs])
            perm = _derangement(len(recs))
            row.update(
                si_sdr=float(np.mean([si_sdr(w, r) for w, r in zip(testset.waves, recs)])),
                frechet=frechet_distance(EmbeddingStats.from_embeddings(ref_emb), EmbeddingStats.from_embeddings(rec_emb)),
                kernel=kernel_distance(ref_emb, rec_emb),
                cosine=float(np.mean([cosine(a, b) for a, b in zip(ref_emb, rec_emb)])),
                cosine_shuffled=float(np.mean([cosine(ref_emb[i], rec_emb[j]) for i, j in enumerate(perm)])),
            )
        rows.append(row)
        log.info("eval %s: %s", v.name, {k: _fmt(row.get(k, "")) for k in COLUMNS})
    if out is not None:
        write_table(out, rows)
    return rows


def write_table(path, rows: list[dict]):
    lines = ["\t".join(COLUMNS)]
    lines += ["\t".join(_fmt(r.get(c, "nan")) for c in COLUMNS) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")
