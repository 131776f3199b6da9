"""Fixed forward noising chain: variance schedule and closed-form decay."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule over ``steps`` noising steps.

    ``alpha_bar[s-1]`` is the cumulative signal fraction after step ``s``
    (steps are 1-indexed at the call sites, arrays are 0-indexed).
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=np.float64))
        object.__setattr__(self, "alpha_bar", np.asarray(self.alpha_bar, dtype=np.float64))
        if beta.ndim != 1 or len(beta) < 1:
            raise ValueError("beta must be a non-empty 1-d array")
        if (beta <= 0).any() or (beta >= 1).any():
            raise ValueError("beta values must lie strictly inside (0, 1)")
        if not np.array_equal(self.alpha, 1.0 - beta):
            raise ValueError("alpha must equal 1 - beta")
        if not np.array_equal(self.alpha_bar, np.cumprod(self.alpha)):
            raise ValueError("alpha_bar must be the running product of alpha")
        if len(self.alpha_bar) > 1 and not (np.diff(self.alpha_bar) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")

    @property
    def steps(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, s: int) -> float:
        """Cumulative signal fraction at 1-indexed step ``s``."""
        if not 1 <= s <= self.steps:
            raise ValueError(f"step {s} out of range [1, {self.steps}]")
        return float(self.alpha_bar[s - 1])


def build_linear_schedule(steps: int, beta_start: float = 1e-3, beta_end: float = 1e-2) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end`` inclusive."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got start={beta_start} end={beta_end}"
        )
    if steps == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def diffuse(
    x_init: torch.Tensor,
    s: int,
    schedule: NoiseSchedule,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
    seed: int | None = None,
) -> torch.Tensor:
    """Decay a map to noising step ``s``:

        x_s = sqrt(alpha_bar_s) * x_init + sqrt(1 - alpha_bar_s) * eps

    ``noise`` supplies eps explicitly; otherwise eps is drawn from
    ``generator`` (or a fresh generator seeded with ``seed``). Works the same
    on prediction maps and feature maps.
    """
    a = schedule.alpha_bar_at(s)
    if noise is None:
        if generator is None and seed is not None:
            generator = torch.Generator(device=x_init.device).manual_seed(seed)
        noise = torch.randn(
            x_init.shape, generator=generator, dtype=x_init.dtype, device=x_init.device
        )
    elif noise.shape != x_init.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != input shape {tuple(x_init.shape)}")
    signal = torch.sqrt(torch.as_tensor(a, dtype=x_init.dtype, device=x_init.device))
    scale = torch.sqrt(torch.as_tensor(1.0 - a, dtype=x_init.dtype, device=x_init.device))
    return signal * x_init + scale * noise
