"""Diffusion-process arithmetic: schedules, forward noising and reverse steps.

Timesteps are 1-based. Every per-step array carries a leading entry for
``t = 0`` (clean data) so that ``alpha_bars[0] == 1`` and indexing by the
timestep itself is always valid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch

from .errors import ConfigurationError, DimensionError

Timestep = Union[int, torch.Tensor]
RandomSource = Union[torch.Generator, Sequence[torch.Generator]]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    sigma_sqs: np.ndarray

    def __post_init__(self):
        for arr in (self.betas, self.alpha_bars, self.sigma_sqs):
            arr.setflags(write=False)

    def coef(self, name: str, t: Timestep, like: torch.Tensor) -> torch.Tensor:
        """Look up a per-step array at ``t`` and shape it to broadcast against ``like``."""
        table = getattr(self, name)
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            idx = t.detach().cpu().long().numpy()
            vals = torch.as_tensor(table[idx], dtype=like.dtype, device=like.device)
            return vals.reshape(-1, *([1] * (like.ndim - 1)))
        return torch.tensor(float(table[int(t)]), dtype=like.dtype, device=like.device)


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ConfigurationError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    T = int(T)
    betas = np.zeros(T + 1, dtype=np.float64)
    betas[1:] = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.ones(T + 1, dtype=np.float64)
    alpha_bars[1:] = np.cumprod(1.0 - betas[1:])
    sigma_sqs = betas.copy()
    return NoiseSchedule(T=T, betas=betas, alpha_bars=alpha_bars, sigma_sqs=sigma_sqs)


def _check_t(t: Timestep, sched: NoiseSchedule, low: int = 1):
    if isinstance(t, torch.Tensor):
        lo, hi = int(t.min()), int(t.max())
    else:
        lo = hi = int(t)
    if lo < low or hi > sched.T:
        raise ConfigurationError(f"timestep out of range [{low}, {sched.T}]: {t}")


def _check_shapes(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(x0: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Noise clean data straight to step ``t``: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    ``t`` may be an int or a 1-D tensor with one timestep per batch element.
    """
    _check_shapes(x0, eps)
    _check_t(t, sched)
    ab = sched.coef("alpha_bars", t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def standard_normal(like: torch.Tensor, rng: RandomSource) -> torch.Tensor:
    """N(0, I) shaped like ``like``; a sequence of generators draws one batch item each."""
    if isinstance(rng, torch.Generator):
        return torch.randn(like.shape, generator=rng, dtype=like.dtype, device=like.device)
    if len(rng) != like.shape[0]:
        raise DimensionError(f"{len(rng)} generators for a batch of {like.shape[0]}")
    return torch.cat(
        [torch.randn((1,) + tuple(like.shape[1:]), generator=g, dtype=like.dtype, device=like.device) for g in rng]
    )


def forward_step(x_prev: torch.Tensor, t: int, sched: NoiseSchedule, rng: RandomSource) -> torch.Tensor:
    _check_t(t, sched)
    beta = sched.coef("betas", t, x_prev)
    z = standard_normal(x_prev, rng)
    return (1.0 - beta).sqrt() * x_prev + beta.sqrt() * z


def posterior_mean(x_t: torch.Tensor, t: Timestep, eps_pred: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Learned reverse-step mean, computed from a noise prediction."""
    _check_shapes(x_t, eps_pred)
    _check_t(t, sched)
    beta = sched.coef("betas", t, x_t)
    ab = sched.coef("alpha_bars", t, x_t)
    return (x_t - beta / (1.0 - ab).sqrt() * eps_pred) / (1.0 - beta).sqrt()


def ddpm_step(
    x_t: torch.Tensor,
    t: int,
    eps_pred: torch.Tensor,
    sched: NoiseSchedule,
    rng: RandomSource,
) -> torch.Tensor:
    """Ancestral step t -> t-1. The last step (t=1) returns the mean without noise."""
    mean = posterior_mean(x_t, t, eps_pred, sched)
    if int(t) == 1:
        return mean
    sigma = sched.coef("sigma_sqs", t, x_t).sqrt()
    return mean + sigma * standard_normal(x_t, rng)


def make_ddim_timesteps(T: int, S: int) -> list[int]:
    """Evenly strided increasing subsequence of 1..T with S entries, ending at T."""
    if S < 1 or T < 1:
        raise ConfigurationError(f"need T >= 1 and S >= 1, got T={T}, S={S}")
    if S > T:
        raise ConfigurationError(f"DDIM steps S={S} exceed T={T}")
    stride = T // S
    first = T - stride * (S - 1)
    return [first + stride * i for i in range(S)]


def predict_x0(x_t: torch.Tensor, t: int, eps_pred: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    ab = sched.coef("alpha_bars", t, x_t)
    return (x_t - (1.0 - ab).sqrt() * eps_pred) / ab.sqrt()


def ddim_step(
    x_t: torch.Tensor,
    t: int,
    t_prev: int,
    eps_pred: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM jump from ``t`` to ``t_prev``; ``t_prev = 0`` yields x0."""
    if int(t_prev) >= int(t):
        raise ConfigurationError(f"DDIM step must go backwards: t_prev={t_prev} >= t={t}")
    _check_shapes(x_t, eps_pred)
    _check_t(t, sched)
    _check_t(t_prev, sched, low=0)
    x0_hat = predict_x0(x_t, t, eps_pred, sched)
    ab_prev = sched.coef("alpha_bars", t_prev, x_t)
    return ab_prev.sqrt() * x0_hat + (1.0 - ab_prev).sqrt() * eps_pred
