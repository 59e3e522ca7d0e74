"""Conditional denoiser: a small UNet whose cross-attention attends the
instruction branch and the character branch separately and averages the two
attended results before the residual add.

Conditioning enters twice: (mask, masked image) are concatenated onto the
noisy input channels, and the two encoder outputs feed every cross-attention
site (the two coarsest resolutions plus the middle block).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .encoders import D_CTX, EncoderOutput
from .errors import ConfigError, ContractError


@dataclass
class ModelConfig:
    in_channels: int = 7  # noisy 3 + mask 1 + masked image 3
    out_channels: int = 3
    base_width: int = 32
    channel_mults: tuple = (1, 2, 4)
    attn_levels: tuple = (1, 2)  # the two coarsest resolutions
    time_dim: int = 128
    d_ctx: int = D_CTX
    heads: int = 8
    groups: int = 8
    char_branch_enabled: bool = True
    fusion_weight: float = 0.5  # weight of each branch; 0.5 = simple average

    def widths(self) -> list:
        return [self.base_width * m for m in self.channel_mults]

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels, "out_channels": self.out_channels,
            "base_width": self.base_width, "channel_mults": list(self.channel_mults),
            "attn_levels": list(self.attn_levels), "time_dim": self.time_dim,
            "d_ctx": self.d_ctx, "heads": self.heads, "groups": self.groups,
            "char_branch_enabled": self.char_branch_enabled,
            "fusion_weight": self.fusion_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = set(cls().to_dict())
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kw = dict(d)
        for k in ("channel_mults", "attn_levels"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


def sinusoidal_features(t: int, dim: int) -> np.ndarray:
    """Timestep features: dim/2 geometric frequencies from 1 down to 1e-4."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float64)


class TimeEmbedding(nn.Module):
    """Sinusoidal features followed by a 2-layer MLP."""

    def __init__(self, rng, dim: int, t_max: int, dtype=np.float32):
        self.dim = dim
        self.t_max = t_max
        self.fc1 = nn.Linear(rng, dim, dim, dtype=dtype)
        self.fc2 = nn.Linear(rng, dim, dim, dtype=dtype)
        self.dtype = dtype

    def __call__(self, ts) -> Tensor:
        ts = np.atleast_1d(np.asarray(ts))
        if (ts < 1).any() or (ts > self.t_max).any():
            raise ContractError(f"timestep out of range [1, {self.t_max}]: {ts}")
        feats = np.stack([sinusoidal_features(int(t), self.dim) for t in ts])
        return self.fc2(ad.silu(self.fc1(Tensor(feats.astype(self.dtype)))))


class CrossAttnBranch(nn.Module):
    """One branch of the dual block: K/V over a context plus output projection.

    Projections carry no bias so that zeroing the value projection zeroes the
    whole branch (the ablation mechanism)."""

    def __init__(self, rng, width: int, d_ctx: int, dtype=np.float32):
        self.wk = nn.Linear(rng, d_ctx, width, bias=False, dtype=dtype)
        self.wv = nn.Linear(rng, d_ctx, width, bias=False, dtype=dtype)
        self.wo = nn.Linear(rng, width, width, bias=False, dtype=dtype)

    def __call__(self, q: Tensor, ctx: EncoderOutput, heads: int) -> Tensor:
        # q: (B, heads, n, hd) already projected and split
        b, h, n, hd = q.shape
        width = h * hd
        lk = ctx.embeddings.shape[-2]
        k = self.wk(ctx.embeddings).reshape(b, lk, h, hd).transpose(0, 2, 1, 3)
        v = self.wv(ctx.embeddings).reshape(b, lk, h, hd).transpose(0, 2, 1, 3)
        scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
        bias = np.where(ctx.valid[:, None, None, :], 0.0, -1e9).astype(scores.dtype)
        attn = ad.softmax(scores + Tensor(bias), axis=-1)
        out = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, width)
        return self.wo(out)


class DualAttnBlock(nn.Module):
    """Shared queries, per-branch K/V/out projections, averaged fusion.

    out = z + w * Attn(LN(z) -> instr) + w * Attn(LN(z) -> char), w = 0.5."""

    def __init__(self, rng, width: int, d_ctx: int, heads: int, dtype=np.float32):
        if width % heads:
            raise ConfigError(f"attention width {width} not divisible by heads {heads}")
        self.width = width
        self.heads = heads
        self.norm = nn.LayerNorm(width, dtype=dtype)
        self.wq = nn.Linear(rng, width, width, bias=False, dtype=dtype)
        self.instr = CrossAttnBranch(rng, width, d_ctx, dtype)
        self.char = CrossAttnBranch(rng, width, d_ctx, dtype)

    def _queries(self, z: Tensor) -> Tensor:
        b, n, d = z.shape
        hd = d // self.heads
        return self.wq(self.norm(z)).reshape(b, n, self.heads, hd).transpose(0, 2, 1, 3)

    def branch_output(self, z: Tensor, ctx: EncoderOutput, which: str) -> Tensor:
        """One branch in isolation (no fusion, no residual); test hook."""
        branch = self.instr if which == "instr" else self.char
        return branch(self._queries(z), ctx, self.heads)

    def __call__(self, z: Tensor, instr: EncoderOutput, char: EncoderOutput | None,
                 fusion_weight: float = 0.5, char_enabled: bool = True) -> Tensor:
        if instr.embeddings.shape[-1] != self.instr.wk.w.shape[0]:
            raise ConfigError(
                f"context dim {instr.embeddings.shape[-1]} does not match "
                f"block d_ctx {self.instr.wk.w.shape[0]}"
            )
        q = self._queries(z)
        out = self.instr(q, instr, self.heads) * fusion_weight
        if char_enabled and char is not None:
            out = out + self.char(q, char, self.heads) * fusion_weight
        return z + out


class ResBlock(nn.Module):
    """GN -> SiLU -> conv3x3 -> +time -> GN -> SiLU -> conv3x3 (+shortcut)."""

    def __init__(self, rng, cin: int, cout: int, time_dim: int, groups: int,
                 dtype=np.float32):
        self.norm1 = nn.GroupNorm(groups, cin, dtype=dtype)
        self.conv1 = nn.Conv2d(rng, cin, cout, 3, padding=1, dtype=dtype)
        self.temb = nn.Linear(rng, time_dim, cout, dtype=dtype)
        self.norm2 = nn.GroupNorm(groups, cout, dtype=dtype)
        self.conv2 = nn.Conv2d(rng, cout, cout, 3, padding=1, dtype=dtype)
        self.skip = nn.Conv2d(rng, cin, cout, 1, dtype=dtype) if cin != cout else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(ad.silu(self.norm1(x)))
        tproj = self.temb(ad.silu(temb))
        b, c = tproj.shape
        h = h + tproj.reshape(b, c, 1, 1)
        h = self.conv2(ad.silu(self.norm2(h)))
        s = self.skip(x) if self.skip is not None else x
        return h + s


def _to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).transpose(0, 2, 1)


def _to_map(x: Tensor, h: int, w: int) -> Tensor:
    b, n, c = x.shape
    return x.transpose(0, 2, 1).reshape(b, c, h, w)


class UNet(nn.Module):
    """Down/mid/up denoiser with dual cross-attention at the coarse levels."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 dtype=np.float32):
        cfg = config
        self.config = cfg
        widths = cfg.widths()
        g, td = cfg.groups, cfg.time_dim
        self.time = TimeEmbedding(rng, td, t_max=10**9, dtype=dtype)
        self.stem = nn.Conv2d(rng, cfg.in_channels, widths[0], 3, padding=1, dtype=dtype)
        self.down_res = []
        self.down_attn = []
        self.downsample = []
        prev = widths[0]
        for lvl, wd in enumerate(widths):
            if lvl > 0:
                # 4x4/stride-2 halves even extents exactly (conv2d rejects
                # non-integer output sizes)
                self.downsample.append(nn.Conv2d(rng, prev, prev, 4, stride=2,
                                                 padding=1, dtype=dtype))
            self.down_res.append(ResBlock(rng, prev, wd, td, g, dtype))
            self.down_attn.append(
                DualAttnBlock(rng, wd, cfg.d_ctx, cfg.heads, dtype)
                if lvl in cfg.attn_levels else None)
            prev = wd
        self.mid_res1 = ResBlock(rng, prev, prev, td, g, dtype)
        self.mid_attn = DualAttnBlock(rng, prev, cfg.d_ctx, cfg.heads, dtype)
        self.mid_res2 = ResBlock(rng, prev, prev, td, g, dtype)
        self.up_res = []
        self.up_attn = []
        for lvl in reversed(range(len(widths))):
            wd = widths[lvl]
            self.up_res.append(ResBlock(rng, prev + wd, wd, td, g, dtype))
            self.up_attn.append(
                DualAttnBlock(rng, wd, cfg.d_ctx, cfg.heads, dtype)
                if lvl in cfg.attn_levels else None)
            prev = wd
        self.out_norm = nn.GroupNorm(g, widths[0], dtype=dtype)
        self.out_conv = nn.Conv2d(rng, widths[0], cfg.out_channels, 3, padding=1,
                                  dtype=dtype)

    def _attend(self, block: DualAttnBlock | None, h: Tensor,
                instr: EncoderOutput, char: EncoderOutput | None) -> Tensor:
        if block is None:
            return h
        b, c, hh, ww = h.shape
        z = _to_tokens(h)
        z = block(z, instr, char, self.config.fusion_weight,
                  self.config.char_branch_enabled)
        return _to_map(z, hh, ww)

    def __call__(self, x: Tensor, ts, instr: EncoderOutput,
                 char: EncoderOutput | None) -> Tensor:
        """x: (B, in_channels, H, W) with mask and masked image already
        concatenated; returns predicted noise (B, 3, H, W)."""
        cfg = self.config
        if x.shape[1] != cfg.in_channels:
            raise ConfigError(
                f"expected {cfg.in_channels} input channels, got shape {x.shape}"
            )
        if cfg.char_branch_enabled and char is None:
            raise ContractError("char context required when the branch is enabled")
        temb = self.time(ts)
        h = self.stem(x)
        skips = []
        for lvl in range(len(cfg.channel_mults)):
            if lvl > 0:
                h = self.downsample[lvl - 1](h)
            h = self.down_res[lvl](h, temb)
            h = self._attend(self.down_attn[lvl], h, instr, char)
            skips.append(h)
        h = self.mid_res1(h, temb)
        h = self._attend(self.mid_attn, h, instr, char)
        h = self.mid_res2(h, temb)
        for i, lvl in enumerate(reversed(range(len(cfg.channel_mults)))):
            h = ad.concat([h, skips[lvl]], axis=1)
            h = self.up_res[i](h, temb)
            h = self._attend(self.up_attn[i], h, instr, char)
            if lvl > 0:
                h = ad.upsample_nearest2x(h)
        return self.out_conv(ad.silu(self.out_norm(h)))
