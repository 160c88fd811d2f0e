"""Guided reverse-process sampling for single images and joint frame stacks.

One loop serves both paths: a clip of F frames is denoised jointly (frame
blocks share self-attention, see ``video``), and F = 1 degenerates exactly to
single-image sampling.  Classifier-free guidance always evaluates the
unconditional and conditional branches in one fixed-layout batch
``[uncond frames | cond frames]`` so results are reproducible bit-for-bit
for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .codec import Codec
from .control import ControlBranch
from .denoiser import Denoiser
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    cfg_combine,
    inference_timesteps,
    predict_x0,
    q_sample,
    sampler_step,
)
from .text import TextEncoder, Vocab, null_token_ids, tokenize
from .video import VideoSamplerConfig, smooth_interleaved


@dataclass
class GenerationModels:
    """Everything needed to turn a prompt (and masks) into pixels."""

    schedule: NoiseSchedule
    denoiser: Denoiser
    text_encoder: TextEncoder
    vocab: Vocab
    codec: Codec
    branch: ControlBranch | None = None


def prompt_contexts(models: GenerationModels, prompt: str) -> tuple[torch.Tensor, torch.Tensor]:
    """(conditional, null) context sequences for one prompt, each (L, D)."""
    max_tokens = models.text_encoder.config.max_tokens
    ids = torch.tensor([tokenize(prompt, models.vocab, max_tokens)])
    null_ids = torch.tensor([null_token_ids(models.vocab, max_tokens)])
    with torch.no_grad():
        return models.text_encoder(ids)[0], models.text_encoder(null_ids)[0]


def _latent_factor(codec: Codec) -> int:
    return codec.config.downsample_factor if codec.config.mode == "learned" else 1


@torch.no_grad()
def sample_frames(
    models: GenerationModels,
    prompt: str,
    masks: torch.Tensor | None,
    config: VideoSamplerConfig,
    seed: int,
    image_size: int | None = None,
    initial_noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Jointly denoise config.n_frames frames; returns (F, C, H, W) in [0, 1].

    masks: (F, 1, H, W) in [0, 1], or None for unconditional spatial layout
    (then image_size or initial_noise fixes the resolution).  At the
    configured smoother steps the clean prediction is interleave-averaged
    (parity alternating even, odd, even, ... across those steps), re-noised
    to the current level, and the trajectory continues.
    """
    F = config.n_frames
    sampler = config.sampler
    if masks is not None:
        if models.branch is None:
            raise ValueError("masks given but no control branch loaded")
        if masks.shape[0] != F:
            raise ValueError(f"got {masks.shape[0]} masks for {F} frames")
    rng = torch.Generator().manual_seed(seed)

    ctx_c, ctx_u = prompt_contexts(models, prompt)
    contexts = torch.stack([ctx_u] * F + [ctx_c] * F)

    zc = models.codec.latent_channels
    f = _latent_factor(models.codec)
    if masks is not None:
        lat_h, lat_w = masks.shape[-2] // f, masks.shape[-1] // f
    elif initial_noise is not None:
        lat_h, lat_w = initial_noise.shape[-2:]
    elif image_size is not None:
        lat_h = lat_w = image_size // f
    else:
        raise ValueError("need masks, image_size, or initial_noise to fix the spatial size")

    if initial_noise is not None:
        x = initial_noise.clone()
    else:
        x = torch.empty(F, zc, lat_h, lat_w).normal_(generator=rng)

    taus = inference_timesteps(models.schedule.T, sampler.num_inference_steps)
    pairs = list(zip(taus, taus[1:] + [-1]))
    smooth_at = set(config.resolved_smoother_steps())
    parity_cycle = {s: ("even", "odd")[i % 2] for i, s in enumerate(sorted(smooth_at))}

    mask_batch = None if masks is None else torch.cat([masks, masks])

    for k, (t, t_prev) in enumerate(pairs):
        xb = torch.cat([x, x])
        tb = torch.full((2 * F,), t, dtype=torch.long)
        control = None
        if mask_batch is not None:
            control = models.branch(xb, tb, contexts, mask_batch, n_frames=F)
        eps_all = models.denoiser(xb, tb, contexts, control=control, n_frames=F)
        eps = cfg_combine(eps_all[:F], eps_all[F:], sampler.guidance_scale)

        if k in smooth_at:
            x0_hat = predict_x0(x, eps, t, models.schedule)
            x0_hat = smooth_interleaved(x0_hat, parity_cycle[k])
            z = torch.empty_like(x).normal_(generator=rng)
            x = sampler_step(
                q_sample(x0_hat, t, z, models.schedule), z, t, t_prev,
                models.schedule, sampler, rng,
            )
        else:
            x = sampler_step(x, eps, t, t_prev, models.schedule, sampler, rng)

    return torch.clamp(models.codec.decode_diffusion(x), 0.0, 1.0)


def sample_video(
    models: GenerationModels,
    prompt: str,
    mask_frames: torch.Tensor | None,
    config: VideoSamplerConfig,
    seed: int,
) -> torch.Tensor:
    """Joint multi-frame sampling with per-frame mask conditioning."""
    return sample_frames(models, prompt, mask_frames, config, seed)


def sample_image(
    models: GenerationModels,
    prompt: str,
    mask: torch.Tensor | None,
    config: SamplerConfig,
    seed: int,
    image_size: int | None = None,
    initial_noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Single-image sampling; returns (C, H, W) in [0, 1].

    mask: (1, H, W) or (1, 1, H, W); when absent, image_size fixes the
    output resolution.
    """
    vconfig = VideoSamplerConfig(n_frames=1, sampler=config, smoother_enabled=False)
    masks = None
    if mask is not None:
        masks = mask.reshape(1, 1, *mask.shape[-2:]).to(torch.float32)
    frames = sample_frames(
        models, prompt, masks, vconfig, seed,
        image_size=image_size, initial_noise=initial_noise,
    )
    return frames[0]


@torch.no_grad()
def sample_image_batch(
    models: GenerationModels,
    prompts: list[str],
    masks: torch.Tensor | None,
    config: SamplerConfig,
    seed: int,
    image_size: int,
) -> torch.Tensor:
    """Denoise a batch of independent images, one prompt each; (B, C, H, W).

    Rows do not interact (frame blocks of size one); batching only amortizes
    network evaluation.  masks: (B, 1, H, W) or None.
    """
    B = len(prompts)
    if masks is not None:
        if models.branch is None:
            raise ValueError("masks given but no control branch loaded")
        if masks.shape[0] != B:
            raise ValueError(f"got {masks.shape[0]} masks for {B} prompts")
    rng = torch.Generator().manual_seed(seed)
    max_tokens = models.text_encoder.config.max_tokens
    ids = torch.tensor([tokenize(p, models.vocab, max_tokens) for p in prompts])
    null_ids = torch.tensor([null_token_ids(models.vocab, max_tokens)])
    cond = models.text_encoder(ids)
    null = models.text_encoder(null_ids)[0]
    contexts = torch.cat([null[None].expand(B, -1, -1), cond])

    f = _latent_factor(models.codec)
    x = torch.empty(
        B, models.codec.latent_channels, image_size // f, image_size // f
    ).normal_(generator=rng)
    mask_batch = None if masks is None else torch.cat([masks, masks])

    taus = inference_timesteps(models.schedule.T, config.num_inference_steps)
    for t, t_prev in zip(taus, taus[1:] + [-1]):
        xb = torch.cat([x, x])
        tb = torch.full((2 * B,), t, dtype=torch.long)
        control = None
        if mask_batch is not None:
            control = models.branch(xb, tb, contexts, mask_batch, n_frames=1)
        eps_all = models.denoiser(xb, tb, contexts, control=control, n_frames=1)
        eps = cfg_combine(eps_all[:B], eps_all[B:], config.guidance_scale)
        x = sampler_step(x, eps, t, t_prev, models.schedule, config, rng)
    return torch.clamp(models.codec.decode_diffusion(x), 0.0, 1.0)


def to_uint8(frames: torch.Tensor) -> torch.Tensor:
    """[0,1] float frames -> uint8, round-half-away-from-zero via +0.5 floor."""
    return torch.clamp(frames * 255.0 + 0.5, 0, 255).to(torch.uint8)
