"""Flat ``key = value`` run configuration shared by every command."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .denoiser import DenoiserConfig
from .errors import ConfigurationError
from .sampler import SamplerConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # schedule
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # network
    levels: int = 4
    base_channels: int = 16
    channel_mults: tuple = (1, 2, 4, 8)
    groups: int = 8
    tap: str = "decoder"
    # trainer
    iterations: int = 10000
    lr: float = 1e-4
    batch_size: int = 1
    ratios: tuple = (2, 3, 4)
    grad_clip: float = 1.0
    log_every: int = 100
    ckpt_every: int = 1000
    prefetch: int = 0
    # sampler
    sampler: str = "ddim"
    steps: int = 100
    sample_batch: int = 8
    jobs: int = 1
    # data
    count: int = 20
    size: tuple = (33, 64, 64)
    # root seed
    seed: int = 0

    def model_config(self, ablation: bool = False) -> DenoiserConfig:
        return DenoiserConfig(
            levels=self.levels,
            base_channels=self.base_channels,
            channel_mults=self.channel_mults,
            groups=self.groups,
            ablation=ablation,
            T=self.T,
            tap=self.tap,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations,
            lr=self.lr,
            batch_size=self.batch_size,
            ratios=self.ratios,
            T=self.T,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            grad_clip=self.grad_clip,
            log_every=self.log_every,
            ckpt_every=self.ckpt_every,
            seed=self.seed,
            prefetch=self.prefetch,
        )

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            mode=self.sampler, steps=self.steps, seed=self.seed, batch_size=self.sample_batch, jobs=self.jobs
        )

    def dump(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{f.name} = {v}")
        return "\n".join(out)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value: Any):
    kind = _TYPES[key]
    if not isinstance(value, str):
        return tuple(value) if kind == "tuple" else value
    value = value.strip()
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "tuple":
            return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
        return value
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {value!r}") from exc


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigurationError(f"line {lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_run_config(path=None, overrides: Mapping[str, Any] = ()) -> RunConfig:
    """File values over defaults, then non-None ``overrides`` over both."""
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    for key, value in dict(overrides).items():
        if value is None:
            continue
        if key not in _TYPES:
            raise ConfigurationError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value)
    try:
        return dataclasses.replace(RunConfig(), **values)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
