"""Counter-based random substreams.

Every random draw in the package is keyed by (global seed, label, *counters),
so results never depend on batch order or on how many draws happened before.
"""
from __future__ import annotations

import numpy as np
import torch

LABELS = {
    "corpus": 1,
    "sigma": 2,
    "noise": 3,
    "dropout": 4,
    "mixing": 5,
    "sampler": 6,
    "batch": 7,
    "init": 8,
    "quantizer": 9,
    "eval": 10,
}


def _entropy(seed: int, label: str, counters) -> list[int]:
    return [int(seed) & 0xFFFFFFFFFFFFFFFF, LABELS[label], *(int(c) for c in counters)]


def substream(seed: int, label: str, *counters: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(_entropy(seed, label, counters))))


def torch_substream(seed: int, label: str, *counters: int) -> torch.Generator:
    ss = np.random.SeedSequence(_entropy(seed, label, counters))
    g = torch.Generator()
    g.manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF))
    return g
