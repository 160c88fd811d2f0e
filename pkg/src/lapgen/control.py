"""Mask-conditioned control branch for a frozen base denoiser.

A trainable copy of the base encoder (stem, down levels, middle block, time
MLP) consumes the noised input plus an encoded segmentation-mask hint.  Its
middle and per-level skip features pass through 1x1 convolutions whose
weights and biases start at exactly zero, so at initialization the branch
contributes nothing and the controlled forward matches the base bitwise.
Training updates only branch parameters; the base stays frozen.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .denoiser import Denoiser, time_embedding


@dataclass
class ControlSignal:
    """Additive features for the base decoder: one per skip, one for middle."""

    skips: list[torch.Tensor]
    middle: torch.Tensor


class HintBlock(nn.Module):
    """Three convolutions mapping a 1-channel mask to first-level features."""

    def __init__(self, out_channels: int):
        super().__init__()
        mid = max(out_channels // 2, 4)
        self.conv1 = nn.Conv2d(1, mid, 3, padding=1)
        self.conv2 = nn.Conv2d(mid, mid, 3, padding=1)
        self.conv3 = nn.Conv2d(mid, out_channels, 3, padding=1)

    def forward(self, mask: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv1(mask))
        h = F.silu(self.conv2(h))
        return self.conv3(h)


class ControlBranch(nn.Module):
    def __init__(self, base: Denoiser, seed: int):
        super().__init__()
        cfg = base.config
        self.config = cfg
        # Trainable copies; parameter values identical to the base at init.
        self.encoder = copy.deepcopy(base.encoder)
        self.time_mlp = copy.deepcopy(base.time_mlp)
        self.hint = HintBlock(cfg.base_channels)
        self.zero_convs = nn.ModuleList(
            nn.Conv2d(ch, ch, 1) for ch in cfg.skip_channels
        )
        self.zero_mid = nn.Conv2d(cfg.middle_channels, cfg.middle_channels, 1)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in [*self.zero_convs, self.zero_mid]:
                conv.weight.zero_()
                conv.bias.zero_()
            for name, p in self.hint.named_parameters():
                if name.endswith(".bias"):
                    p.zero_()
                else:
                    fan_in = p.shape[1] * p[0][0].numel()
                    p.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=gen)

    def forward(self, x_t, t, context, mask, n_frames: int = 1) -> ControlSignal:
        if mask.shape[-2:] != x_t.shape[-2:]:
            raise ValueError(
                f"mask spatial dims {tuple(mask.shape[-2:])} != input {tuple(x_t.shape[-2:])}"
            )
        temb = self.time_mlp(time_embedding(t, self.config.time_embed_dim))
        hint = self.hint(mask)
        mid, skips = self.encoder(x_t, temb, context, n_frames, stem_extra=hint)
        return ControlSignal(
            skips=[zc(s) for zc, s in zip(self.zero_convs, skips)],
            middle=self.zero_mid(mid),
        )


def init_from_base(base: Denoiser, seed: int) -> ControlBranch:
    """Control branch whose copied weights equal the base encoder bitwise."""
    return ControlBranch(base, seed)


def zero_conv_apply(conv: nn.Conv2d, features: torch.Tensor) -> torch.Tensor:
    """Standard 1x1 convolution; all-zero parameters yield all-zero output."""
    if features.shape[1] != conv.in_channels:
        raise ValueError(
            f"channel count {features.shape[1]} != conv expects {conv.in_channels}"
        )
    return conv(features)


def controlled_denoise(base: Denoiser, branch: ControlBranch, x_t, t, context,
                       mask, n_frames: int = 1) -> torch.Tensor:
    """Base forward with the branch's zero-conv features injected.

    Gradients reach branch parameters through the base decoder; the base
    parameters themselves are left untouched by control training.
    """
    control = branch(x_t, t, context, mask, n_frames)
    return base(x_t, t, context, control=control, n_frames=n_frames)
