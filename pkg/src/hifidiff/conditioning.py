"""Hierarchical conditional feature extraction.

Adjacent slices are concatenated and pushed through an hourglass U-Net whose
residual blocks are modulated channel-wise by an embedding of the offset k.
The decoder-side feature maps at every resolution form the conditional
pyramid consumed by the denoiser's lateral connections.
"""
from __future__ import annotations

import math
from typing import Callable, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, DomainError

EMBED_DIM = 128
# small enough that GroupNorm(a*h + b) == GroupNorm(h) to ~1e-6 for a >= 0.1
GN_EPS = 1e-9

Scalar = Union[float, torch.Tensor]


def resolve_groups(channels: int, groups: int) -> int:
    g = min(groups, channels)
    return math.gcd(channels, g)


def group_norm(h: torch.Tensor, groups: int, eps: float = GN_EPS) -> torch.Tensor:
    """Affine-free group normalization over (C/groups, H, W) blocks of a (B, C, H, W) map."""
    B, C = h.shape[:2]
    g = resolve_groups(C, groups)
    x = h.reshape(B, g, -1)
    mean = x.mean(dim=-1, keepdim=True)
    var = (x - mean).pow(2).mean(dim=-1, keepdim=True)
    return ((x - mean) / torch.sqrt(var + eps)).reshape(h.shape)


def channel_mod(h: torch.Tensor, emb: torch.Tensor, affine: nn.Module, groups: int) -> torch.Tensor:
    """k_s * GroupNorm(h) + k_b with (k_s, k_b) projected from a (B, D) embedding."""
    C = h.shape[1]
    params = affine(emb)
    if params.shape[-1] != 2 * C:
        raise DimensionError(f"affine produced {params.shape[-1]} values, need {2 * C}")
    k_s, k_b = params[:, :C, None, None], params[:, C:, None, None]
    return k_s * group_norm(h, groups) + k_b


def element_mod(h: torch.Tensor, cond: torch.Tensor, proj: nn.Module, groups: int) -> torch.Tensor:
    """x_s * GroupNorm(h) + x_b with per-pixel (x_s, x_b) projected from ``cond``."""
    if cond.shape[-2:] != h.shape[-2:]:
        raise DimensionError(
            f"conditional feature {tuple(cond.shape[-2:])} does not match feature map {tuple(h.shape[-2:])}"
        )
    C = h.shape[1]
    params = proj(cond)
    if params.shape[1] != 2 * C:
        raise DimensionError(f"projection produced {params.shape[1]} channels, need {2 * C}")
    x_s, x_b = params[:, :C], params[:, C:]
    return x_s * group_norm(h, groups) + x_b


def modulation_affine(in_dim: int, channels: int) -> nn.Linear:
    """Embedding -> (scale, bias) projection, initialised so the scale starts around 1."""
    lin = nn.Linear(in_dim, 2 * channels)
    with torch.no_grad():
        lin.weight.mul_(0.1)
        lin.bias.zero_()
        lin.bias[:channels] = 1.0
    return lin


def modulation_conv(in_ch: int, channels: int) -> nn.Conv2d:
    conv = nn.Conv2d(in_ch, 2 * channels, 3, padding=1)
    with torch.no_grad():
        conv.weight.mul_(0.1)
        conv.bias.zero_()
        conv.bias[:channels] = 1.0
    return conv


def sinusoidal_encoding(t: torch.Tensor, dim: int = EMBED_DIM) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _as_batch(v: Scalar, dtype: torch.dtype) -> torch.Tensor:
    v = torch.as_tensor(v, dtype=dtype)
    return v.reshape(-1)


class OffsetEmbedding(nn.Module):
    """Raw offset k -> two fully connected layers -> 128-d index embedding."""

    def __init__(self, dim: int = EMBED_DIM):
        super().__init__()
        self.fc1 = nn.Linear(1, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, k: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.silu(self.fc1(k.reshape(-1, 1))))


class TimestepEmbedding(nn.Module):
    def __init__(self, T: int, dim: int = EMBED_DIM):
        super().__init__()
        self.T = T
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        enc = sinusoidal_encoding(t, self.dim).to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(enc)))


def embed_offset(k: Scalar, embedding: OffsetEmbedding) -> torch.Tensor:
    dtype = embedding.fc1.weight.dtype
    k = _as_batch(k, dtype)
    if bool(((k < 0) | (k > 1)).any()):
        raise DomainError(f"offset k must lie in [0, 1], got {k.tolist()}")
    return embedding(k)


def embed_timestep(t: Union[int, torch.Tensor], embedding: TimestepEmbedding) -> torch.Tensor:
    t = torch.as_tensor(t).reshape(-1)
    if bool(((t < 1) | (t > embedding.T)).any()):
        raise DomainError(f"timestep must lie in [1, {embedding.T}], got {t.tolist()}")
    return embedding(t)


class ResBlock(nn.Module):
    """GN -> SiLU -> conv, then ChannelMod(emb) -> SiLU -> conv, plus identity skip."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int):
        super().__init__()
        self.groups = groups
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.affine = modulation_affine(emb_dim, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb, cond=None):
        h = self.conv1(F.silu(group_norm(x, self.groups)))
        h = channel_mod(h, emb, self.affine, self.groups)
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


BlockFactory = Callable[[int, int, int], nn.Module]


class HourglassUNet(nn.Module):
    """U-Net skeleton shared by the conditioning network and the denoiser.

    One block per encoder level, a bottleneck block at the coarsest level,
    and one block per decoder level that sees the upsampled features
    concatenated with the encoder skip. ``make_block(in_ch, out_ch, level)``
    builds the blocks, so the two networks differ only in block type.
    """

    def __init__(self, in_ch: int, channels: Sequence[int], make_block: BlockFactory):
        super().__init__()
        self.channels = list(channels)
        L = len(self.channels)
        c = self.channels
        self.inc = nn.Conv2d(in_ch, c[0], 3, padding=1)
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = c[0]
        for lvl in range(L):
            self.enc.append(make_block(prev, c[lvl], lvl))
            if lvl < L - 1:
                self.down.append(nn.Conv2d(c[lvl], c[lvl], 3, stride=2, padding=1))
            prev = c[lvl]
        self.dec = nn.ModuleList()
        self.up = nn.ModuleList()
        for lvl in range(L):
            if lvl == L - 1:
                self.dec.append(make_block(c[lvl], c[lvl], lvl))
            else:
                self.up.append(Upsample(c[lvl + 1], c[lvl]))
                self.dec.append(make_block(2 * c[lvl], c[lvl], lvl))

    @property
    def levels(self) -> int:
        return len(self.channels)

    def forward(self, x, emb, lateral: Optional[Sequence[torch.Tensor]] = None):
        """Returns (final decoder map, encoder taps, decoder taps), taps indexed by level."""
        L = self.levels
        side = x.shape[-1], x.shape[-2]
        stride = 2 ** (L - 1)
        if side[0] % stride or side[1] % stride:
            raise DimensionError(f"spatial size {side} not divisible by {stride}; pad the input")

        def cond(lvl):
            return None if lateral is None else lateral[lvl]

        h = self.inc(x)
        enc_taps = []
        for lvl in range(L):
            h = self.enc[lvl](h, emb, cond(lvl))
            enc_taps.append(h)
            if lvl < L - 1:
                h = self.down[lvl](h)
        dec_taps = [None] * L
        for lvl in reversed(range(L)):
            if lvl == L - 1:
                h = self.dec[lvl](h, emb, cond(lvl))
            else:
                h = self.up[lvl](h)
                h = self.dec[lvl](torch.cat([h, enc_taps[lvl]], dim=1), emb, cond(lvl))
            dec_taps[lvl] = h
        return h, enc_taps, dec_taps


class HiFE(nn.Module):
    """Offset-conditioned U-Net over the concatenated slice pair; emits the feature pyramid."""

    def __init__(self, channels: Sequence[int], groups: int = 8, tap: str = "decoder"):
        super().__init__()
        if tap not in ("decoder", "encoder"):
            raise ValueError(f"unknown pyramid tap {tap!r}")
        self.tap = tap
        self.groups = groups
        self.offset_embed = OffsetEmbedding()
        self.unet = HourglassUNet(
            2, channels, lambda i, o, lvl: ResBlock(i, o, EMBED_DIM, groups)
        )

    def forward(self, x_i: torch.Tensor, x_ip1: torch.Tensor, k: Scalar) -> list[torch.Tensor]:
        if x_i.shape != x_ip1.shape:
            raise DimensionError(f"slice shapes differ: {tuple(x_i.shape)} vs {tuple(x_ip1.shape)}")
        emb = embed_offset(k, self.offset_embed)
        if emb.shape[0] == 1 and x_i.shape[0] > 1:
            emb = emb.expand(x_i.shape[0], -1)
        _, enc, dec = self.unet(torch.cat([x_i, x_ip1], dim=1), emb)
        return dec if self.tap == "decoder" else enc


def hife_forward(x_i: torch.Tensor, x_ip1: torch.Tensor, k: Scalar, hife: HiFE) -> list[torch.Tensor]:
    return hife(x_i, x_ip1, k)
