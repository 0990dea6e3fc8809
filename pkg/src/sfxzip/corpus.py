"""Synthetic corpus on disk (16-bit WAVs + manifest) and its in-memory latent form."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, InvalidArgument
from .frontend import KINDS, FrontendConfig, Waveform, frontend_encode, read_manifest, synth_clip, wav_read, wav_write
from .seeding import substream

log = logging.getLogger(__name__)

MANIFEST = "manifest.csv"


def write_corpus(out, clips: int, duration_s: float = 1.0, seed: int = 0, force: bool = False) -> Path:
    """Write ``clips`` synthetic clips, kinds cycling through KINDS, plus a manifest."""
    if clips < 1:
        raise InvalidArgument("--clips must be >= 1")
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise InvalidArgument(f"{out} exists and is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(clips):
        kind = KINDS[i % len(KINDS)]
        clip_seed = int(substream(seed, "corpus", i).integers(2 ** 31))
        name = f"clip_{i:05d}_{kind}.wav"
        wav_write(out / name, synth_clip(kind, duration_s, clip_seed))
        lines.append(f"{name},{kind},{clip_seed},{duration_s}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    return out / MANIFEST


def manifest_path(corpus) -> Path:
    p = Path(corpus)
    return p / MANIFEST if p.is_dir() else p


@dataclass
class LatentCorpus:
    x0: torch.Tensor  # N x C x T, scaled latents
    class_ids: torch.Tensor  # N
    waves: list[Waveform]
    names: list[str]

    def __len__(self):
        return len(self.names)

    def subset(self, idx) -> "LatentCorpus":
        idx = list(idx)
        return LatentCorpus(self.x0[idx], self.class_ids[idx], [self.waves[i] for i in idx], [self.names[i] for i in idx])


def load_waves(corpus) -> tuple[list[Waveform], list[dict]]:
    path = manifest_path(corpus)
    if not path.exists():
        raise FormatError(f"corpus manifest not found: {path}")
    rows = read_manifest(path)
    if not rows:
        raise FormatError(f"{path}: empty manifest")
    return [wav_read(r["path"]) for r in rows], rows


def load_latents(corpus, fe: FrontendConfig, dtype=torch.float32) -> LatentCorpus:
    waves, rows = load_waves(corpus)
    lats = [frontend_encode(w, fe).data for w in waves]
    T = {x.shape[1] for x in lats}
    if len(T) != 1:
        raise FormatError(f"corpus clips differ in length ({sorted(T)} frames); training needs equal lengths")
    classes = [KINDS.index(r["kind"]) if r["kind"] in KINDS else 0 for r in rows]
    return LatentCorpus(torch.as_tensor(np.stack(lats), dtype=dtype), torch.as_tensor(classes),
                        waves, [str(r["path"].name) for r in rows])
