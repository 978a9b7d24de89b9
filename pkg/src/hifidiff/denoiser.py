"""Noise-prediction network conditioned on a slice pair and offset."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import (
    EMBED_DIM,
    HiFE,
    HourglassUNet,
    OffsetEmbedding,
    TimestepEmbedding,
    channel_mod,
    element_mod,
    embed_offset,
    embed_timestep,
    group_norm,
    modulation_affine,
    modulation_conv,
)
from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class DenoiserConfig:
    levels: int = 4
    base_channels: int = 16
    channel_mults: tuple = (1, 2, 4, 8)
    groups: int = 8
    ablation: bool = False
    T: int = 1000
    tap: str = "decoder"
    zero_init_output: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        if self.levels < 2:
            raise ConfigurationError(f"levels must be >= 2, got {self.levels}")
        if len(self.channel_mults) != self.levels:
            raise ConfigurationError(
                f"need {self.levels} channel multipliers, got {len(self.channel_mults)}"
            )

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mults]

    @property
    def stride(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d

    def hash(self) -> str:
        """Identity of the parameter layout; differs between full and ablated models."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class Condition:
    """Everything the main branch needs from (x_i, x_{i+1}, k); computed once per slice."""

    pyramid: list
    offset_emb: Optional[torch.Tensor] = None


class CondResBlock(nn.Module):
    """GN -> SiLU -> conv, ChannelMod(t), ElementMod(lateral), SiLU -> conv, identity skip."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, cond_ch: int, groups: int):
        super().__init__()
        self.groups = groups
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.affine = modulation_affine(emb_dim, out_ch)
        self.lateral = modulation_conv(cond_ch, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb, cond):
        if cond.shape[-2:] != x.shape[-2:]:
            raise DimensionError(
                f"lateral feature {tuple(cond.shape[-2:])} does not match level size {tuple(x.shape[-2:])}"
            )
        h = self.conv1(F.silu(group_norm(x, self.groups)))
        h = channel_mod(h, emb, self.affine, self.groups)
        h = element_mod(h, cond, self.lateral, self.groups)
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


def cond_residual_block(h, t_emb, cond, block: CondResBlock):
    return block(h, t_emb, cond)


class HiFiDiff(nn.Module):
    """Main denoising branch plus its conditioning path.

    In full mode the conditioning path is :class:`HiFE` and its decoder
    pyramid drives element-wise modulation at every level. In ablation mode
    the concatenated raw slices, average-pooled to each level, drive the
    element-wise modulation instead, and the offset embedding is concatenated
    with the timestep embedding for channel-wise modulation. Both modes share
    ``condition`` / ``denoise`` / ``forward`` so training and sampling code is
    mode-agnostic.
    """

    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = config
        ch = config.channels
        L = config.levels
        if config.ablation:
            self.offset_embed = OffsetEmbedding()
            emb_dim = 2 * EMBED_DIM
            lateral_ch = [2] * L
        else:
            self.hife = HiFE(ch, config.groups, config.tap)
            emb_dim = EMBED_DIM
            lateral_ch = ch
        self.time_embed = TimestepEmbedding(config.T)
        self.main = HourglassUNet(
            1, ch, lambda i, o, lvl: CondResBlock(i, o, emb_dim, lateral_ch[lvl], config.groups)
        )
        self.out = nn.Conv2d(ch[0], 1, 3, padding=1)
        # per-timestep gain on x_t added to the output; GroupNorm hides the
        # image mean from the main branch, so without it the DC of eps drifts
        self.skip_gain = nn.Linear(EMBED_DIM, 1)
        if config.zero_init_output:
            for p in (*self.out.parameters(), *self.skip_gain.parameters()):
                nn.init.zeros_(p)

    def condition(self, lower: torch.Tensor, upper: torch.Tensor, k) -> Condition:
        if lower.shape != upper.shape:
            raise DimensionError(f"slice shapes differ: {tuple(lower.shape)} vs {tuple(upper.shape)}")
        if not self.config.ablation:
            return Condition(self.hife(lower, upper, k))
        pair = torch.cat([lower, upper], dim=1)
        pyramid = [pair if lvl == 0 else F.avg_pool2d(pair, 2**lvl) for lvl in range(self.config.levels)]
        emb = embed_offset(k, self.offset_embed)
        if emb.shape[0] == 1 and lower.shape[0] > 1:
            emb = emb.expand(lower.shape[0], -1)
        return Condition(pyramid, emb)

    def denoise(self, x_t: torch.Tensor, t: Union[int, torch.Tensor], cond: Condition) -> torch.Tensor:
        if x_t.ndim != 4 or x_t.shape[1] != 1:
            raise DimensionError(f"x_t must be (B, 1, H, W), got {tuple(x_t.shape)}")
        if len(cond.pyramid) != self.config.levels:
            raise DimensionError(f"pyramid has {len(cond.pyramid)} levels, model expects {self.config.levels}")
        B = x_t.shape[0]
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and B > 1:
            t = t.expand(B)
        temb = embed_timestep(t, self.time_embed)
        emb = temb if cond.offset_emb is None else torch.cat([cond.offset_emb, temb], dim=1)
        h, _, _ = self.main(x_t, emb, cond.pyramid)
        gain = self.skip_gain(temb)[:, :, None, None]
        return self.out(F.silu(group_norm(h, self.config.groups))) + gain * x_t

    def forward(self, x_t, t, lower, upper, k):
        return self.denoise(x_t, t, self.condition(lower, upper, k))


def eps_theta(x_t: torch.Tensor, t, pyramid: Sequence[torch.Tensor], model: HiFiDiff) -> torch.Tensor:
    """Noise prediction from a precomputed conditional feature pyramid (full mode)."""
    if model.config.ablation:
        raise ConfigurationError("eps_theta needs a full-mode model; use eps_theta_ablated")
    return model.denoise(x_t, t, Condition(list(pyramid)))


def eps_theta_ablated(x_t, t, x_i, x_ip1, k, model: HiFiDiff) -> torch.Tensor:
    if not model.config.ablation:
        raise ConfigurationError("eps_theta_ablated needs a model built with ablation=True")
    return model(x_t, t, x_i, x_ip1, k)
