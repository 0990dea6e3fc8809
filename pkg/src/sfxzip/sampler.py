"""Karras sigma schedule and the deterministic Heun (2nd order) ODE sampler."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidArgument, NumericFailure
from .seeding import torch_substream


@dataclass
class SigmaSchedule:
    sigmas: torch.Tensor  # N + 1 entries, last one exactly 0
    sigma_min: float
    sigma_max: float
    rho: float

    @property
    def steps(self) -> int:
        return len(self.sigmas) - 1


def build_schedule(N: int = 64, sigma_min: float = 0.002, sigma_max: float = 80.0, rho: float = 7.0,
                   dtype=torch.float64) -> SigmaSchedule:
    if N < 1 or not 0 < sigma_min < sigma_max or rho <= 0:
        raise InvalidArgument(f"invalid schedule N={N}, sigma in [{sigma_min}, {sigma_max}], rho={rho}")
    if N == 1:
        sig = torch.tensor([sigma_max], dtype=torch.float64)
    else:
        i = torch.arange(N, dtype=torch.float64)
        lo, hi = sigma_min ** (1 / rho), sigma_max ** (1 / rho)
        sig = (hi + i / (N - 1) * (lo - hi)) ** rho
        sig[0], sig[-1] = sigma_max, sigma_min
    sig = torch.cat([sig, torch.zeros(1, dtype=torch.float64)]).to(dtype)
    return SigmaSchedule(sig, sigma_min, sigma_max, rho)


def heun_sample(denoiser, shape, schedule: SigmaSchedule, seed: int = 0, noise: torch.Tensor | None = None,
                dtype=torch.float32) -> torch.Tensor:
    """Integrate the probability-flow ODE from sigma_max down to 0.

    ``denoiser(x, sigma)`` returns the x0 estimate. Initial noise comes from
    the "sampler" substream of ``seed`` unless ``noise`` is given.
    """
    if noise is None:
        noise = torch.randn(shape, generator=torch_substream(seed, "sampler"), dtype=torch.float64)
    sig = schedule.sigmas
    x = (noise.to(torch.float64) * float(sig[0])).to(dtype)
    for i in range(len(sig) - 1):
        s, s_next = float(sig[i]), float(sig[i + 1])
        d = (x - denoiser(x, s)) / s
        x_next = x + (s_next - s) * d
        if s_next > 0:
            d2 = (x_next - denoiser(x_next, s_next)) / s_next
            x_next = x + (s_next - s) * 0.5 * (d + d2)
        x = x_next
        if not torch.all(torch.isfinite(x)):
            raise NumericFailure(f"non-finite sampler state at step {i} (sigma={s:g})")
    return x
