"""Zero-shot video mechanics for a trained image denoiser.

No video training happens anywhere: an image denoiser is reused for joint
multi-frame denoising by (a) letting every convolution act per frame with
shared weights — a k x k kernel applied framewise is exactly a 1 x k x k
kernel over (frame, h, w) — and (b) widening spatial self-attention so each
frame's queries attend over keys/values pooled from all frames of the clip.
An interleaved smoother averages alternating interior frames of the clean
prediction mid-trajectory to suppress flicker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

from .denoiser import Denoiser
from .diffusion import SamplerConfig


class VideoDenoiser(nn.Module):
    """A trained image denoiser evaluated jointly over clip frames.

    Shares the base parameters (nothing is copied or added); input is a
    stack of frames, framewise convolutions keep weights identical, and
    self-attention runs across the whole clip.
    """

    def __init__(self, base: Denoiser):
        super().__init__()
        self.base = base
        self.config = base.config

    @property
    def param_count(self) -> int:
        return self.base.param_count

    def forward(self, frames: torch.Tensor, t, context, control=None) -> torch.Tensor:
        # frames: (F, C, H, W) treated as one clip
        n = frames.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((n,), int(t), dtype=torch.long)
        if context.dim() == 2:
            context = context[None].expand(n, -1, -1)
        return self.base(frames, t, context, control=control, n_frames=n)


def inflate(denoiser: Denoiser) -> VideoDenoiser:
    """Video-capable view of a trained denoiser; parameter values unchanged."""
    return VideoDenoiser(denoiser)


def cross_frame_attend(queries: torch.Tensor, keys: torch.Tensor,
                       values: torch.Tensor) -> torch.Tensor:
    """Each frame's queries attend over all frames' keys/values.

    queries/keys/values: (F, L, D).  Returns (F, L, D).  With F = 1 this is
    ordinary self-attention.
    """
    if queries.shape != keys.shape or keys.shape != values.shape:
        raise ValueError("queries/keys/values must share (F, L, D) shape")
    F_, L, D = queries.shape
    k = keys.reshape(F_ * L, D)
    v = values.reshape(F_ * L, D)
    scores = queries.reshape(F_ * L, D) @ k.T / math.sqrt(D)
    out = torch.softmax(scores, dim=-1) @ v
    return out.reshape(F_, L, D)


def midpoint(prev: torch.Tensor, nxt: torch.Tensor) -> torch.Tensor:
    return (prev + nxt) / 2


def smooth_interleaved(
    x0_preds: torch.Tensor,
    parity: str,
    interp: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] = midpoint,
) -> torch.Tensor:
    """Replace interior frames of one parity by interpolations of their neighbors.

    x0_preds: (F, ...) stack of per-frame clean predictions.  Frames i with
    1 <= i <= F-2 and i % 2 == parity become interp(frame[i-1], frame[i+1]);
    endpoints and the opposite parity pass through unchanged.
    """
    if parity not in ("even", "odd"):
        raise ValueError(f"parity must be 'even' or 'odd', got {parity!r}")
    p = 0 if parity == "even" else 1
    n = x0_preds.shape[0]
    out = x0_preds.clone()
    for i in range(1, n - 1):
        if i % 2 == p:
            out[i] = interp(x0_preds[i - 1], x0_preds[i + 1])
    return out


def temporal_total_variation(frames: torch.Tensor) -> torch.Tensor:
    """Sum over time of per-pixel absolute differences between adjacent frames."""
    return torch.sum(torch.abs(frames[1:] - frames[:-1]))


@dataclass(frozen=True)
class VideoSamplerConfig:
    n_frames: int
    sampler: SamplerConfig
    smoother_enabled: bool = True
    smoother_steps: tuple[int, ...] | None = None  # None -> the two middle steps

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        for s in self.smoother_steps or ():
            if not 0 <= s < self.sampler.num_inference_steps:
                raise ValueError(
                    f"smoother step {s} outside [0, {self.sampler.num_inference_steps})"
                )

    def resolved_smoother_steps(self) -> tuple[int, ...]:
        """Sampling-step indices at which the smoother runs (ascending)."""
        if not self.smoother_enabled or self.n_frames < 3:
            return ()
        if self.smoother_steps is not None:
            return tuple(sorted(set(self.smoother_steps)))
        s = self.sampler.num_inference_steps
        if s < 2:
            return ()
        return (s // 2 - 1, s // 2)
