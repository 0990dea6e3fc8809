"""Training stages.

pretrain  base denoiser, class conditioning only (stands in for a pretrained
          text-to-audio model); all base weights trained.
1         latent encoder + conditioning projection f_phi + LoRA + context Q/K/V
          on the denoising objective; base weights frozen.
q         freeze the encoder, dump every compressed frame, fit the quantizer.
3         finetune f_phi + LoRA on quantized conditioning, keeping z for a
          fraction of clips; encoder and base frozen.

Every random draw is keyed by (seed, label, stage, step, clip), so results do
not depend on batch order or on where a run was resumed.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, TrainConfig
from .corpus import LatentCorpus, load_latents
from .denoiser import Conditioning, Denoiser, EdmParams, build_conditioning, denoise, loss_weight
from .encoder import LatentEncoder
from .errors import InvalidArgument, MissingCheckpoint, NumericFailure
from .frontend import FrontendConfig, fit_channel_scale
from .nn import ParamStore, adamw_step, load_checkpoint, save_checkpoint
from .quantizer import QuantizerModel, dequantize_frames, quantize_frames, select_finetune_M, train_codebooks
from .seeding import substream, torch_substream

log = logging.getLogger(__name__)

STAGES = ("pretrain", "1", "q", "3")
STAGE_ID = {"pretrain": 0, "1": 1, "q": 2, "3": 3}
CKPT = {"pretrain": "pretrain.safetensors", "1": "stage1.safetensors", "q": "quantizer.safetensors",
        "3": "stage3.safetensors"}
FRONTEND_CKPT = "frontend.safetensors"
TRAINABLE = {"pretrain": ("base",), "1": ("lora", "cond_proj", "ctx"), "3": ("lora", "cond_proj")}
ADAPTER_GROUPS = {"1": ("lora", "cond_proj", "ctx"), "3": ("lora", "cond_proj")}


@dataclass
class LossRecord:
    step: int
    sigmas: tuple
    loss: float
    mse: float


@dataclass
class Models:
    encoder: LatentEncoder
    denoiser: Denoiser


@dataclass
class Batch:
    x0: torch.Tensor  # B x C x T
    class_ids: torch.Tensor  # B
    clip_ids: list[int]  # corpus indices, used to key the random draws


# -- random draws ------------------------------------------------------------------

def sample_sigma(rng: np.random.Generator, p: EdmParams = EdmParams()) -> float:
    """ln(sigma) ~ N(p_mean, p_std^2)."""
    return float(math.exp(p.p_mean + p.p_std * rng.standard_normal()))


def bernoulli(seed: int, label: str, p: float, *counters: int) -> bool:
    return bool(substream(seed, label, *counters).random() < p)


def _draws(batch: Batch, tcfg: TrainConfig, stage: str, step: int, dropout_p: float):
    sid = STAGE_ID[stage]
    shape = batch.x0.shape[1:]
    sig, eps, drop = [], [], []
    for c in batch.clip_ids:
        sig.append(sample_sigma(substream(tcfg.seed, "sigma", sid, step, c), tcfg.edm))
        eps.append(torch.randn(shape, generator=torch_substream(tcfg.seed, "noise", sid, step, c)))
        drop.append(bernoulli(tcfg.seed, "dropout", dropout_p, sid, step, c))
    dt = batch.x0.dtype
    return torch.tensor(sig, dtype=dt), torch.stack(eps).to(dt), torch.tensor(drop)


def keep_z_mask(batch: Batch, tcfg: TrainConfig, step: int) -> torch.Tensor:
    return torch.tensor([bernoulli(tcfg.seed, "mixing", tcfg.zq_mix_keep_z_p, step, c) for c in batch.clip_ids])


# -- losses and steps ---------------------------------------------------------------

def weighted_loss(den, x0, sigma, eps, cond: Conditioning, p: EdmParams):
    """Per-clip lambda(sigma) * mean((D(x0 + sigma eps) - x0)^2) and plain MSE."""
    D = denoise(x0 + sigma[:, None, None] * eps, sigma, cond, den, p)
    mse = (D - x0).pow(2).mean(dim=(1, 2))
    return loss_weight(sigma, p) * mse, mse


def _apply(store: ParamStore, loss: torch.Tensor, sigma, step: int, lr: float, tcfg: TrainConfig):
    if not torch.isfinite(loss):
        raise NumericFailure(f"non-finite loss at step {step} (sigmas {[round(float(s), 5) for s in sigma]})")
    store.zero_grad()
    loss.backward()
    adamw_step(store, lr, weight_decay=tcfg.weight_decay)


def _record(step, sigma, per, mse) -> LossRecord:
    return LossRecord(step, tuple(float(s) for s in sigma), float(per.detach().mean()), float(mse.detach().mean()))


def pretrain_step(batch: Batch, models: Models, store: ParamStore, tcfg: TrainConfig, step: int) -> LossRecord:
    sigma, eps, drop = _draws(batch, tcfg, "pretrain", step, tcfg.pretrain_class_dropout_p)
    cond = Conditioning(None, [], 1, batch.class_ids, drop)
    per, mse = weighted_loss(models.denoiser, batch.x0, sigma, eps, cond, tcfg.edm)
    _apply(store, per.mean(), sigma, step, tcfg.pretrain_lr, tcfg)
    return _record(step, sigma, per, mse)


def stage1_step(batch: Batch, models: Models, store: ParamStore, tcfg: TrainConfig, step: int) -> LossRecord:
    sigma, eps, drop = _draws(batch, tcfg, "1", step, tcfg.class_dropout_p)
    T = batch.x0.shape[-1]
    z = models.encoder(batch.x0)
    cond = build_conditioning(z, models.denoiser.cond_proj, models.encoder.cfg.t, T, batch.class_ids, drop)
    per, mse = weighted_loss(models.denoiser, batch.x0, sigma, eps, cond, tcfg.edm)
    _apply(store, per.mean(), sigma, step, tcfg.lr, tcfg)
    return _record(step, sigma, per, mse)


def quantized_latents(z: torch.Tensor, q: QuantizerModel, m_use: int) -> torch.Tensor:
    """dequantize(quantize(z), m_use) for z [B, D, T']."""
    B, D, Tp = z.shape
    frames = z.detach().transpose(1, 2).reshape(-1, D)
    zq = dequantize_frames(quantize_frames(frames, q), q, m_use)
    return zq.to(z.dtype).reshape(B, Tp, D).transpose(1, 2)


def stage3_step(batch: Batch, models: Models, quantizer: QuantizerModel, store: ParamStore, tcfg: TrainConfig,
                step: int, m_use: int, z: torch.Tensor | None = None, zq: torch.Tensor | None = None) -> LossRecord:
    """``z`` / ``zq`` may be passed precomputed; the encoder is frozen so they are fixed per clip."""
    sigma, eps, drop = _draws(batch, tcfg, "3", step, tcfg.class_dropout_p)
    T = batch.x0.shape[-1]
    if z is None:
        with torch.no_grad():
            z = models.encoder(batch.x0)
    if zq is None:
        zq = quantized_latents(z, quantizer, m_use)
    keep = keep_z_mask(batch, tcfg, step)
    mixed = torch.where(keep[:, None, None], z, zq)
    cond = build_conditioning(mixed, models.denoiser.cond_proj, models.encoder.cfg.t, T, batch.class_ids, drop)
    per, mse = weighted_loss(models.denoiser, batch.x0, sigma, eps, cond, tcfg.edm)
    _apply(store, per.mean(), sigma, step, tcfg.lr, tcfg)
    return _record(step, sigma, per, mse)


@torch.no_grad()
def validation_loss(models: Models, data: LatentCorpus, tcfg: TrainConfig, z_cond: torch.Tensor | None = None,
                    draws: int | None = None, chunk: int = 32) -> float:
    """Mean weighted loss over fixed (sigma, noise) draws per clip, class label dropped.

    ``z_cond`` overrides the conditioning latents (e.g. quantized ones);
    by default the encoder output is used.
    """
    draws = draws or tcfg.val_draws
    t = models.encoder.cfg.t
    total, count = 0.0, 0
    for s in range(0, len(data), chunk):
        x0 = data.x0[s:s + chunk]
        B, _, T = x0.shape
        z = models.encoder(x0) if z_cond is None else z_cond[s:s + chunk]
        cond = build_conditioning(z, models.denoiser.cond_proj, t, T, data.class_ids[s:s + chunk], True)
        for j in range(draws):
            ids = range(s, s + B)
            sigma = torch.tensor([sample_sigma(substream(tcfg.seed, "eval", i, j), tcfg.edm) for i in ids], dtype=x0.dtype)
            eps = torch.stack([torch.randn(x0.shape[1:], generator=torch_substream(tcfg.seed, "eval", i, j, 1))
                               for i in ids]).to(x0.dtype)
            per, _ = weighted_loss(models.denoiser, x0, sigma, eps, cond, tcfg.edm)
            total += float(per.sum())
            count += B
    return total / count


def smoothed(losses, window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    x = np.asarray(losses, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# -- model construction and checkpoints -----------------------------------------------

def build_models(cfg: RunConfig) -> Models:
    with torch.random.fork_rng():
        torch.manual_seed(int(substream(cfg.seed, "init", 0).integers(2 ** 62)))
        enc = LatentEncoder(cfg.encoder)
        den = Denoiser(cfg.decoder, seed=int(substream(cfg.seed, "init", 1).integers(2 ** 62)))
    return Models(enc, den)


def attach_adapters(models: Models, cfg: RunConfig):
    models.denoiser.add_adapters(seed=int(substream(cfg.seed, "init", 2).integers(2 ** 62)))


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()[:16]


def _require(run_dir: Path, stage: str) -> Path:
    p = run_dir / CKPT[stage]
    if not p.exists():
        what = "quantizer" if stage == "q" else ("pretrain" if stage == "pretrain" else f"stage {stage}")
        raise MissingCheckpoint(f"{what} checkpoint missing: expected {p}")
    return p


def _denoiser_tensors(den: Denoiser, groups) -> dict:
    return {f"denoiser.{n}": p.detach() for n, p in den.named_parameters() if den.group_of(n) in groups}


def _load_into(module: torch.nn.Module, tensors: dict, prefix: str):
    params = dict(module.named_parameters())
    bufs = dict(module.named_buffers())
    with torch.no_grad():
        for k, v in tensors.items():
            if not k.startswith(prefix):
                continue
            name = k[len(prefix):]
            target = params.get(name, bufs.get(name))
            if target is None:
                raise InvalidArgument(f"checkpoint tensor {k!r} has no matching parameter")
            if target.shape != v.shape:
                raise InvalidArgument(f"checkpoint tensor {k!r} has shape {tuple(v.shape)}, model {tuple(target.shape)}")
            target.copy_(v.to(target.dtype))


def load_frontend(run_dir, cfg: RunConfig) -> FrontendConfig:
    tensors, _ = load_checkpoint(_require_file(Path(run_dir) / FRONTEND_CKPT, "frontend scale"))
    return cfg.frontend.build(tensors["channel_scale"].double().numpy())


def _require_file(p: Path, what: str) -> Path:
    if not p.exists():
        raise MissingCheckpoint(f"{what} checkpoint missing: expected {p}")
    return p


def load_models(run_dir, cfg: RunConfig, adapters: str | None = "3") -> Models:
    """Rebuild models from a run directory with the Stage-1 or Stage-3 adapter set."""
    run_dir = Path(run_dir)
    models = build_models(cfg)
    base, _ = load_checkpoint(_require(run_dir, "pretrain"))
    _load_into(models.denoiser, base, "denoiser.")
    if adapters is None:
        return models
    attach_adapters(models, cfg)
    s1, _ = load_checkpoint(_require(run_dir, "1"))
    _load_into(models.encoder, s1, "encoder.")
    _load_into(models.denoiser, s1, "denoiser.")
    if adapters == "3":
        s3, _ = load_checkpoint(_require(run_dir, "3"))
        _load_into(models.denoiser, s3, "denoiser.")
    elif adapters != "1":
        raise InvalidArgument(f"unknown adapter set {adapters!r}; expected '1' or '3'")
    models.encoder.eval()
    models.denoiser.eval()
    return models


def load_quantizer(run_dir) -> QuantizerModel:
    return QuantizerModel.load(_require(Path(run_dir), "q"))


def finetune_M(cfg: RunConfig, q: QuantizerModel) -> int:
    m = cfg.train.finetune_M or select_finetune_M(cfg.quantizer.log2K)
    return max(1, min(m, q.M))


def _route(models: Models, trainable: dict):
    names = set(trainable.values())
    for p in [*models.encoder.parameters(), *models.denoiser.parameters()]:
        p.requires_grad_(any(p is q for q in names))


# -- the stage runner ---------------------------------------------------------------------

@dataclass
class StageResult:
    stage: str
    checkpoint: Path
    loss_curve: Path | None
    losses: list
    seconds: float


def split(data: LatentCorpus, tcfg: TrainConfig) -> tuple[LatentCorpus, LatentCorpus]:
    n_val = min(tcfg.val_clips, len(data) // 4)
    n_train = len(data) - n_val
    return data.subset(range(n_train)), data.subset(range(n_train, len(data)))


def _batch(train: LatentCorpus, tcfg: TrainConfig, stage: str, step: int) -> Batch:
    B = min(tcfg.batch_size, len(train))
    idx = substream(tcfg.seed, "batch", STAGE_ID[stage], step).choice(len(train), B, replace=False)
    idx = sorted(int(i) for i in idx)
    return Batch(train.x0[idx], train.class_ids[idx], idx)


def _write_curve(path: Path, losses):
    tmp = path.with_suffix(".tmp")
    tmp.write_text("".join(f"{i + 1}\t{v!r}\n" for i, v in enumerate(losses)))
    tmp.replace(path)


def _write_manifest(run_dir: Path, stage: str, cfg: RunConfig, parents: dict, extra: dict):
    ckpt = run_dir / CKPT[stage]
    man = {"stage": stage, "config_hash": cfg.hash(), "checkpoint": CKPT[stage], "checkpoint_hash": file_hash(ckpt),
           "parents": parents, **extra}
    tmp = run_dir / f".{stage}.json.tmp"
    tmp.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    tmp.replace(run_dir / f"stage_{stage}.json")


def prepare_data(cfg: RunConfig, run_dir) -> LatentCorpus:
    run_dir = Path(run_dir)
    fe_path = run_dir / FRONTEND_CKPT
    if fe_path.exists():
        fe = load_frontend(run_dir, cfg)
    else:
        from .corpus import load_waves

        waves, _ = load_waves(cfg.corpus)
        scale = fit_channel_scale(waves, cfg.frontend.build(), cfg.train.edm.sigma_data)
        save_checkpoint(fe_path, {"channel_scale": torch.as_tensor(scale)}, {"sigma_data": cfg.train.edm.sigma_data})
        fe = load_frontend(run_dir, cfg)
    return load_latents(cfg.corpus, fe)


def run_stage(stage: str, cfg: RunConfig, resume: bool = False, data: LatentCorpus | None = None,
              progress=None) -> StageResult:
    """Run one stage into cfg.run_dir; deterministic given cfg.seed / cfg.train.seed."""
    if stage not in STAGES:
        raise InvalidArgument(f"unknown stage {stage!r}; expected one of {STAGES}")
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.yaml")
    if stage == "1" and not (run_dir / CKPT["pretrain"]).exists():
        log.info("no pretrained base in %s; running the pretrain stage first", run_dir)
        run_stage("pretrain", cfg, resume=resume, data=data, progress=progress)
    if stage == "q":
        _require(run_dir, "1")
    if stage == "3":
        _require(run_dir, "1")
        _require(run_dir, "q")
    t0 = time.time()
    data = data if data is not None else prepare_data(cfg, run_dir)
    train, val = split(data, cfg.train)
    if stage == "q":
        return _run_quantizer(cfg, run_dir, train, t0)
    return _run_trainer(stage, cfg, run_dir, train, val, resume, t0, progress)


def _run_quantizer(cfg: RunConfig, run_dir: Path, train: LatentCorpus, t0: float) -> StageResult:
    models = load_models(run_dir, cfg, adapters="1")
    with torch.no_grad():
        z = torch.cat([models.encoder(train.x0[s:s + 64]) for s in range(0, len(train), 64)])
    frames = z.transpose(1, 2).reshape(-1, z.shape[1]).double()
    save_checkpoint(run_dir / "frames.safetensors", {"frames": frames}, {"clips": len(train)})
    q = train_codebooks(frames.numpy(), cfg=cfg.quantizer)
    q.save(run_dir / CKPT["q"], {"config_hash": cfg.hash(), "log2K": cfg.quantizer.log2K})
    _write_manifest(run_dir, "q", cfg, {"1": file_hash(run_dir / CKPT["1"])},
                    {"frames": int(frames.shape[0]), "stage_mse": q.stage_mse})
    log.info("quantizer: M=%d K=%d, final stage MSE %.4g", q.M, q.K, q.stage_mse[-1])
    return StageResult("q", run_dir / CKPT["q"], None, list(q.stage_mse), time.time() - t0)


def _run_trainer(stage, cfg, run_dir, train, val, resume, t0, progress) -> StageResult:
    tcfg = cfg.train
    steps = {"pretrain": tcfg.pretrain_steps, "1": tcfg.stage1_steps, "3": tcfg.stage3_steps}[stage]
    models = build_models(cfg)
    parents = {}
    quantizer = z_all = zq_all = None
    m_use = None
    if stage != "pretrain":
        base_path = _require(run_dir, "pretrain")
        base, _ = load_checkpoint(base_path)
        _load_into(models.denoiser, base, "denoiser.")
        attach_adapters(models, cfg)
        parents["pretrain"] = file_hash(base_path)
    if stage == "3":
        s1_path = _require(run_dir, "1")
        s1, _ = load_checkpoint(s1_path)
        _load_into(models.encoder, s1, "encoder.")
        _load_into(models.denoiser, s1, "denoiser.")
        parents["1"] = file_hash(s1_path)
        parents["q"] = file_hash(run_dir / CKPT["q"])
        quantizer = load_quantizer(run_dir)
        m_use = finetune_M(cfg, quantizer)
        with torch.no_grad():
            z_all = torch.cat([models.encoder(train.x0[s:s + 64]) for s in range(0, len(train), 64)])
        zq_all = quantized_latents(z_all, quantizer, m_use)

    trainable = {}
    if stage == "1":
        trainable.update({f"encoder.{n}": p for n, p in models.encoder.named_parameters()})
    trainable.update({f"denoiser.{n}": p for n, p in models.denoiser.named_group(*TRAINABLE[stage]).items()})
    _route(models, trainable)
    store = ParamStore(trainable)

    state_path = run_dir / f"{CKPT[stage]}.state"
    losses, start = [], 0
    if resume and state_path.exists():
        st, meta = load_checkpoint(state_path)
        if meta.get("config_hash") != cfg.hash():
            raise InvalidArgument(f"{state_path} was written with a different config")
        with torch.no_grad():
            for k, p in trainable.items():
                p.copy_(st[f"param.{k}"])
        store.load_state_tensors({k[4:]: v for k, v in st.items() if k.startswith("opt.")}, meta["step"])
        losses = [float(v) for v in meta["losses"]]
        start = meta["step"]
        log.info("resuming stage %s at step %d", stage, start)

    def save_state(step):
        tensors = {f"param.{k}": p for k, p in trainable.items()}
        tensors.update({f"opt.{k}": v for k, v in store.state_tensors().items()})
        save_checkpoint(state_path, tensors, {"step": step, "losses": [repr(v) for v in losses],
                                              "config_hash": cfg.hash(), "stage": stage})

    models.encoder.train()
    models.denoiser.train()
    for step in range(start, steps):
        batch = _batch(train, tcfg, stage, step)
        if stage == "pretrain":
            rec = pretrain_step(batch, models, store, tcfg, step)
        elif stage == "1":
            rec = stage1_step(batch, models, store, tcfg, step)
        else:
            rec = stage3_step(batch, models, quantizer, store, tcfg, step, m_use,
                              z=z_all[batch.clip_ids], zq=zq_all[batch.clip_ids])
        losses.append(rec.loss)
        if progress is not None:
            progress(stage, rec)
        if tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0 and step + 1 < steps:
            save_state(step + 1)

    for p in trainable.values():
        p.requires_grad_(True)
    if stage == "pretrain":
        tensors = {f"denoiser.{n}": v for n, v in models.denoiser.state_dict().items()}
    else:
        tensors = _denoiser_tensors(models.denoiser, ADAPTER_GROUPS[stage])
        if stage == "1":
            tensors.update({f"encoder.{n}": v for n, v in models.encoder.state_dict().items()})
    extra = {"steps": steps, "final_loss": losses[-1] if losses else None}
    if stage == "3":
        extra["finetune_M"] = m_use
    save_checkpoint(run_dir / CKPT[stage], tensors, {"stage": stage, "config_hash": cfg.hash(), **extra})
    curve = run_dir / f"stage_{stage}_loss.tsv"
    _write_curve(curve, losses)
    _write_manifest(run_dir, stage, cfg, parents, extra)
    if state_path.exists():
        state_path.unlink()
    return StageResult(stage, run_dir / CKPT[stage], curve, losses, time.time() - t0)
