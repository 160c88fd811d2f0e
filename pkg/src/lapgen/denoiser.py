"""Toy noise-prediction UNet with text cross-attention.

Downsampling encoder, middle block, skip-connected decoder.  Sinusoidal time
embeddings enter every residual block through a learned projection; spatial
attention (self + text cross-attention) sits at the configured levels and in
the middle block.

The same network serves the joint multi-frame video path: convolutions and
norms act per sample, and ``n_frames`` tells the spatial self-attention to
pool keys/values over blocks of consecutive batch rows (one block = one
clip).  With ``n_frames=1`` this reduces exactly to per-image self-attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    attn_levels: tuple[int, ...] | None = None  # None -> lowest level only
    time_embed_dim: int = 128
    context_dim: int = 64
    groups: int = 8

    def __post_init__(self):
        if self.base_channels % self.groups != 0:
            raise ValueError("base_channels must be divisible by groups")
        if min(
            self.in_channels, self.base_channels, self.time_embed_dim,
            self.context_dim, self.groups, *self.channel_mults,
        ) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.attn_levels is not None:
            bad = [l for l in self.attn_levels if not 0 <= l < len(self.channel_mults)]
            if bad:
                raise ValueError(f"attn_levels {bad} outside valid range")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def attention_levels(self) -> tuple[int, ...]:
        if self.attn_levels is None:
            return (self.levels - 1,)
        return tuple(sorted(set(self.attn_levels)))

    @property
    def skip_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mults)

    @property
    def middle_channels(self) -> int:
        return self.base_channels * self.channel_mults[-1]

    @property
    def downsample_divisor(self) -> int:
        return 2 ** (self.levels - 1)


def time_embedding(t: torch.Tensor | int, dim: int) -> torch.Tensor:
    """Sinusoidal embedding: sin/cos of t at frequencies 10000^(-2i/dim)."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    if not torch.is_tensor(t):
        t = torch.tensor(t)
    scalar = t.dim() == 0
    t = t.reshape(-1).to(torch.float32)
    i = torch.arange(dim // 2, dtype=torch.float32)
    freqs = torch.pow(10000.0, -2.0 * i / dim)
    angles = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    return emb[0] if scalar else emb


def grouped_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                      n_frames: int = 1) -> torch.Tensor:
    """Scaled dot-product attention with keys/values pooled per frame block.

    q, k, v: (B, L, D) with rows arranged in contiguous blocks of n_frames.
    Every query attends over the concatenated keys/values of its block.
    """
    B, L, D = q.shape
    if n_frames < 1 or B % n_frames != 0:
        raise ValueError(f"batch {B} not divisible into frame blocks of {n_frames}")
    G = B // n_frames
    qg = q.reshape(G, n_frames * L, D)
    kg = k.reshape(G, n_frames * L, D)
    vg = v.reshape(G, n_frames * L, D)
    attn = torch.softmax(qg @ kg.transpose(1, 2) / math.sqrt(D), dim=-1)
    return (attn @ vg).reshape(B, L, D)


class CrossAttention(nn.Module):
    """Single-head attention of query tokens over a context sequence."""

    def __init__(self, query_dim: int, context_dim: int):
        super().__init__()
        self.q = nn.Linear(query_dim, query_dim, bias=False)
        self.k = nn.Linear(context_dim, query_dim, bias=False)
        self.v = nn.Linear(context_dim, query_dim, bias=False)
        self.out = nn.Linear(query_dim, query_dim)

    def weights(self, queries: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        d = queries.shape[-1]
        scores = self.q(queries) @ self.k(context).transpose(-1, -2) / math.sqrt(d)
        return torch.softmax(scores, dim=-1)

    def forward(self, queries: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        if context.shape[-1] != self.k.in_features:
            raise ValueError(
                f"context dim {context.shape[-1]} != expected {self.k.in_features}"
            )
        return self.out(self.weights(queries, context) @ self.v(context))


class SpatialTransformer(nn.Module):
    """Self-attention (optionally cross-frame) followed by text cross-attention."""

    def __init__(self, channels: int, context_dim: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.self_q = nn.Linear(channels, channels, bias=False)
        self.self_k = nn.Linear(channels, channels, bias=False)
        self.self_v = nn.Linear(channels, channels, bias=False)
        self.self_out = nn.Linear(channels, channels)
        self.cross = CrossAttention(channels, context_dim)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, context: torch.Tensor, n_frames: int = 1) -> torch.Tensor:
        B, C, H, W = x.shape
        h = self.norm(x).reshape(B, C, H * W).transpose(1, 2)
        a = grouped_attention(self.self_q(h), self.self_k(h), self.self_v(h), n_frames)
        h = h + self.self_out(a)
        h = h + self.cross(h, context)
        return x + self.proj(h).transpose(1, 2).reshape(B, C, H, W)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DownLevel(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, cfg: DenoiserConfig, level: int):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, cfg.time_embed_dim, cfg.groups)
        self.attn = (
            SpatialTransformer(out_ch, cfg.context_dim, cfg.groups)
            if level in cfg.attention_levels else None
        )
        self.down = (
            nn.Conv2d(out_ch, out_ch, 3, stride=2, padding=1)
            if level < cfg.levels - 1 else None
        )


class UpLevel(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, cfg: DenoiserConfig, level: int):
        super().__init__()
        self.res = ResBlock(in_ch + skip_ch, out_ch, cfg.time_embed_dim, cfg.groups)
        self.attn = (
            SpatialTransformer(out_ch, cfg.context_dim, cfg.groups)
            if level in cfg.attention_levels else None
        )
        self.up = nn.Conv2d(out_ch, out_ch, 3, padding=1) if level > 0 else None


class EncoderCore(nn.Module):
    """Stem, downsampling levels, and middle block; yields skips for the decoder."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.stem = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)
        chans = cfg.skip_channels
        self.levels = nn.ModuleList(
            DownLevel(cfg.base_channels if i == 0 else chans[i - 1], chans[i], cfg, i)
            for i in range(cfg.levels)
        )
        mid = cfg.middle_channels
        self.mid_res1 = ResBlock(mid, mid, cfg.time_embed_dim, cfg.groups)
        self.mid_attn = SpatialTransformer(mid, cfg.context_dim, cfg.groups)
        self.mid_res2 = ResBlock(mid, mid, cfg.time_embed_dim, cfg.groups)

    def forward(self, x, temb, context, n_frames: int = 1, stem_extra=None):
        h = self.stem(x)
        if stem_extra is not None:
            h = h + stem_extra
        skips = []
        for level in self.levels:
            h = level.res(h, temb)
            if level.attn is not None:
                h = level.attn(h, context, n_frames)
            skips.append(h)
            if level.down is not None:
                h = level.down(h)
        h = self.mid_res1(h, temb)
        h = self.mid_attn(h, context, n_frames)
        h = self.mid_res2(h, temb)
        return h, skips


class DecoderCore(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        chans = cfg.skip_channels
        ups = []
        cur = cfg.middle_channels
        for i in reversed(range(cfg.levels)):
            ups.append(UpLevel(cur, chans[i], chans[i], cfg, i))
            cur = chans[i]
        self.levels = nn.ModuleList(ups)
        self.out_norm = nn.GroupNorm(cfg.groups, cfg.base_channels * cfg.channel_mults[0])
        self.out_conv = nn.Conv2d(cfg.base_channels * cfg.channel_mults[0], cfg.in_channels, 3, padding=1)

    def forward(self, h, skips, temb, context, n_frames: int = 1):
        for level, skip in zip(self.levels, reversed(skips)):
            h = level.res(torch.cat([h, skip], dim=1), temb)
            if level.attn is not None:
                h = level.attn(h, context, n_frames)
            if level.up is not None:
                h = level.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out_conv(F.silu(self.out_norm(h)))


class Denoiser(nn.Module):
    """Epsilon-prediction network over noised inputs, timesteps, and text context."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        d = config.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.encoder = EncoderCore(config)
        self.decoder = DecoderCore(config)

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def time_features(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(time_embedding(t, self.config.time_embed_dim))

    def forward(self, x, t, context, control=None, n_frames: int = 1):
        div = self.config.downsample_divisor
        if x.shape[-1] % div or x.shape[-2] % div:
            raise ValueError(
                f"spatial dims {tuple(x.shape[-2:])} not divisible by {div}"
            )
        if context.shape[-1] != self.config.context_dim:
            raise ValueError(
                f"context dim {context.shape[-1]} != {self.config.context_dim}"
            )
        temb = self.time_features(t)
        h, skips = self.encoder(x, temb, context, n_frames)
        if control is not None:
            h = h + control.middle
            skips = [s + a for s, a in zip(skips, control.skips)]
        return self.decoder(h, skips, temb, context, n_frames)


def init_denoiser(config: DenoiserConfig, seed: int) -> Denoiser:
    """Deterministic parameter initialization from an explicit seed.

    Weights are fan-in scaled normals, norms are identity, biases zero.  The
    final output convolution starts at zero so the untrained network predicts
    zero noise.
    """
    net = Denoiser(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.startswith("decoder.out_conv"):
                p.zero_()
            elif name.endswith(".bias") or "norm" in name:
                if p.dim() == 1 and name.endswith(".weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
            else:
                fan_in = p.shape[1] * (p[0][0].numel() if p.dim() > 2 else 1)
                p.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=gen)
    return net


def denoise(denoiser: Denoiser, x_t, t, context, control=None, n_frames: int = 1):
    """Functional entry point; see Denoiser.forward."""
    return denoiser(x_t, t, context, control=control, n_frames=n_frames)
