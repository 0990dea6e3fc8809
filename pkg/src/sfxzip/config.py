"""Run configuration: every module's settings under one YAML file.

Defaults carry the reference hyperparameters (lr 1e-4, batch 32, class
dropout 0.8, 10% z retention, M = 20, 8000-frame quantizer batches, 64
Heun steps). ``desk_config()`` shrinks the model and schedule so the whole
pipeline trains on a single CPU core in well under an hour.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .denoiser import DecoderConfig, EdmParams
from .encoder import EncoderConfig
from .errors import InvalidArgument
from .frontend import FrontendConfig
from .quantizer import QuantizerConfig


@dataclass
class FrontendSection:
    window_len: int = 256
    hop: int = 128
    sample_rate: int = 12800

    def build(self, channel_scale=None) -> FrontendConfig:
        return FrontendConfig(self.window_len, self.hop, self.sample_rate, channel_scale)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    class_dropout_p: float = 0.8
    zq_mix_keep_z_p: float = 0.1
    edm: EdmParams = field(default_factory=EdmParams)
    weight_decay: float = 0.0
    pretrain_steps: int = 4000
    pretrain_lr: float = 1e-4
    pretrain_class_dropout_p: float = 0.1
    stage1_steps: int = 2000
    stage3_steps: int = 2000
    finetune_M: int | None = None  # None: pick from codebook size
    val_clips: int = 32
    val_draws: int = 4
    checkpoint_every: int = 500

    def __post_init__(self):
        if isinstance(self.edm, dict):
            self.edm = EdmParams(**self.edm)
        for name in ("class_dropout_p", "zq_mix_keep_z_p", "pretrain_class_dropout_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidArgument(f"{name} must be a probability")
        if not self.lr > 0 or not self.pretrain_lr > 0:
            raise InvalidArgument("learning rates must be positive")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")


@dataclass
class SamplerConfig:
    steps: int = 64
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0


@dataclass
class RunConfig:
    seed: int = 0
    corpus: str = "corpus"
    run_dir: str = "run"
    frontend: FrontendSection = field(default_factory=FrontendSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        C = self.frontend.hop
        if self.frontend.window_len != 2 * C:
            raise InvalidArgument("frontend.window_len must be 2 * frontend.hop")
        if self.encoder.channels != C or self.decoder.channels != C:
            raise InvalidArgument(
                f"channel count mismatch: frontend C={C}, encoder {self.encoder.channels}, decoder {self.decoder.channels}")
        if self.decoder.cond_dim != self.encoder.out_dim:
            raise InvalidArgument(
                f"decoder.cond_dim={self.decoder.cond_dim} must equal D = C/c = {self.encoder.out_dim}")
        return self

    @property
    def t(self) -> int:
        return self.encoder.t

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        sections = {"frontend": FrontendSection, "encoder": EncoderConfig, "decoder": DecoderConfig,
                    "train": TrainConfig, "quantizer": QuantizerConfig, "sampler": SamplerConfig}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        for name, typ in sections.items():
            if name in d:
                sub = d[name] or {}
                allowed = {f.name for f in dataclasses.fields(typ)}
                bad = set(sub) - allowed
                if bad:
                    raise InvalidArgument(f"unknown keys in [{name}]: {sorted(bad)}")
                d[name] = typ(**sub)
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise InvalidArgument(f"{path}: not valid YAML ({exc})") from exc
        if data is not None and not isinstance(data, dict):
            raise InvalidArgument(f"{path}: top level must be a mapping")
        return cls.from_dict(data)


def desk_config(**overrides) -> RunConfig:
    """Single-core preset: 25 Hz conditioning (t=4), 128-wide models, about 30 min end to end."""
    cfg = RunConfig(
        encoder=EncoderConfig(depth=4, c=2, t=4, model_dim=128, heads=4, channels=128),
        decoder=DecoderConfig(channels=128, cond_dim=64, model_dim=128, heads=4, joint_blocks=4, audio_blocks=2),
        train=TrainConfig(lr=1e-3, batch_size=16, pretrain_steps=1500, pretrain_lr=1e-3,
                          stage1_steps=2000, stage3_steps=1000),
        quantizer=QuantizerConfig(M=20, log2K=10, batch_frames=8000),
    )
    return RunConfig.from_dict({**cfg.to_dict(), **overrides})
