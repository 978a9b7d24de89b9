"""Reverse-diffusion chains for single in-between slices and whole volumes."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import Volume, hr_depth
from .denoiser import HiFiDiff
from .errors import ConfigurationError, DataError, NumericalFault
from .schedule import (
    NoiseSchedule,
    RandomSource,
    ddim_step,
    ddpm_step,
    make_ddim_timesteps,
    standard_normal,
)

log = logging.getLogger(__name__)

EpsFn = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "ddim"
    steps: int = 100
    seed: int = 0
    batch_size: int = 8
    jobs: int = 1

    def __post_init__(self):
        if self.mode not in ("ddim", "ddpm"):
            raise ConfigurationError(f"sampler must be 'ddim' or 'ddpm', got {self.mode!r}")
        if self.steps < 1 or self.batch_size < 1 or self.jobs < 1:
            raise ConfigurationError("steps, batch_size and jobs must be positive")


def run_chain(x_T: torch.Tensor, eps_fn: EpsFn, sched: NoiseSchedule, cfg: SamplerConfig, rng: RandomSource):
    """Denoise ``x_T`` to x_0 with ``eps_fn(x_t, t)`` as the noise predictor."""
    x = x_T
    if cfg.mode == "ddpm":
        for t in range(sched.T, 0, -1):
            x = ddpm_step(x, t, eps_fn(x, t), sched, rng)
        return x
    if cfg.steps > sched.T:
        raise ConfigurationError(f"DDIM steps {cfg.steps} exceed T={sched.T}")
    seq = make_ddim_timesteps(sched.T, cfg.steps)
    prev = [0] + seq[:-1]
    for t, t_prev in zip(reversed(seq), reversed(prev)):
        x = ddim_step(x, t, t_prev, eps_fn(x, t), sched)
    return x


def slice_generator(seed: int, pair: int, j: int) -> torch.Generator:
    """Independent stream per generated slice, so any subset can be regenerated alone."""
    state = np.random.SeedSequence([seed, pair, j]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def _pad(x: torch.Tensor, stride: int):
    H, W = x.shape[-2:]
    ph, pw = (-H) % stride, (-W) % stride
    if ph == 0 and pw == 0:
        return x, (H, W)
    mode = "reflect" if ph < H and pw < W else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (H, W)


@torch.no_grad()
def generate_slices(
    lower: torch.Tensor,
    upper: torch.Tensor,
    k: torch.Tensor,
    model: HiFiDiff,
    sched: NoiseSchedule,
    cfg: SamplerConfig,
    rng: RandomSource,
) -> torch.Tensor:
    """Batched in-between generation; tensors are (B, 1, H, W), ``k`` is (B,)."""
    k = torch.as_tensor(k, dtype=lower.dtype).reshape(-1)
    if bool(((k <= 0) | (k >= 1)).any()):
        raise ConfigurationError(f"offsets must lie strictly inside (0, 1), got {k.tolist()}")
    stride = model.config.stride
    lower_p, (H, W) = _pad(lower, stride)
    upper_p, _ = _pad(upper, stride)
    cond = model.condition(lower_p, upper_p, k)
    x_T = standard_normal(lower_p, rng)
    x0 = run_chain(x_T, lambda x, t: model.denoise(x, t, cond), sched, cfg, rng)
    if not torch.isfinite(x0).all():
        raise NumericalFault("sampler produced non-finite values; are the parameters trained?")
    return x0[..., :H, :W].clamp(-1.0, 1.0)


def generate_inbetween_slice(
    lower: torch.Tensor,
    upper: torch.Tensor,
    k: float,
    model: HiFiDiff,
    sched: NoiseSchedule,
    cfg: SamplerConfig,
    rng: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """One slice at offset ``k`` between two (H, W) slices; returns (H, W)."""
    if lower.shape != upper.shape or lower.ndim != 2:
        raise DataError(f"expected two (H, W) slices, got {tuple(lower.shape)} and {tuple(upper.shape)}")
    rng = rng if rng is not None else torch.Generator().manual_seed(cfg.seed)
    dtype = next(model.parameters()).dtype
    out = generate_slices(
        lower.to(dtype)[None, None], upper.to(dtype)[None, None], torch.tensor([k]), model, sched, cfg, rng
    )
    return out[0, 0]


def super_resolve_volume(lr: Volume, R: int, model: HiFiDiff, sched: NoiseSchedule, cfg: SamplerConfig) -> Volume:
    """Fill R-1 generated slices between every pair of acquired slices.

    ``lr`` must already be normalized to [-1, 1]. Acquired slices are copied
    to positions m*R untouched; slice m*R+j is generated from slices m and
    m+1 at offset j/R with its own seeded noise stream.
    """
    if int(R) != R or R < 2:
        raise ConfigurationError(f"ratio must be an integer >= 2, got {R}")
    if lr.depth < 2:
        raise DataError(f"need at least two slices along the slice axis, got {lr.depth}")
    if cfg.mode == "ddpm" and cfg.steps != sched.T:
        log.debug("DDPM sampling always runs all %d steps", sched.T)
    R = int(R)
    D = hr_depth(lr.depth, R)
    out = np.empty((D,) + lr.shape[1:], dtype=lr.voxels.dtype)
    out[::R] = lr.voxels
    jobs = [(m, j) for m in range(lr.depth - 1) for j in range(1, R)]
    chunks = [jobs[i:i + cfg.batch_size] for i in range(0, len(jobs), cfg.batch_size)]
    dtype = next(model.parameters()).dtype
    src = torch.from_numpy(lr.voxels.astype(np.float32)).to(dtype)

    def run(chunk):
        lower = torch.stack([src[m] for m, _ in chunk])[:, None]
        upper = torch.stack([src[m + 1] for m, _ in chunk])[:, None]
        k = torch.tensor([j / R for _, j in chunk], dtype=dtype)
        gens = [slice_generator(cfg.seed, m, j) for m, j in chunk]
        return chunk, generate_slices(lower, upper, k, model, sched, cfg, gens)

    if cfg.jobs > 1:
        with ThreadPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = map(run, chunks)
    for chunk, slices in results:
        arr = slices[:, 0].cpu().numpy()
        for (m, j), s in zip(chunk, arr):
            out[m * R + j] = s
        log.debug("generated %d slices", len(chunk))
    sd, sh, sw = lr.spacing
    return replace(lr, voxels=out, spacing=(sd / R, sh, sw))
