"""Optional compression stage between image space and the diffusion space.

Identity mode passes pixels through untouched (the default desk preset runs
diffusion directly at 32x32).  Learned mode is a small convolutional VAE:
``encode`` returns the posterior mean deterministically, sampling happens
only inside codec training.

The codec also carries the affine map into diffusion space (shift/scale), so
samplers always see roughly unit-scale data: identity mode maps [0,1] images
to [-1,1]; a trained codec stores calibrated latent statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    mode: str = "identity"          # "identity" | "learned"
    downsample_factor: int = 4      # power of two
    latent_channels: int = 4
    kl_weight: float = 1e-6
    image_channels: int = 3
    hidden_channels: int = 32

    def __post_init__(self):
        if self.mode not in ("identity", "learned"):
            raise CodecError(f"unknown codec mode {self.mode!r}")
        f = self.downsample_factor
        if f < 1 or (f & (f - 1)) != 0:
            raise CodecError(f"downsample_factor must be a power of 2, got {f}")
        if self.kl_weight < 0:
            raise CodecError("kl_weight must be >= 0")

    @property
    def n_down(self) -> int:
        return int(math.log2(self.downsample_factor))


class Codec(nn.Module):
    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        if config.mode == "identity":
            self.latent_shift = 0.5
            self.latent_scale = 2.0
            self.latent_channels = config.image_channels
            return
        self.latent_shift = 0.0
        self.latent_scale = 1.0
        self.latent_channels = config.latent_channels
        ch = config.hidden_channels
        enc = [nn.Conv2d(config.image_channels, ch, 3, padding=1), nn.SiLU()]
        for _ in range(config.n_down):
            enc += [nn.Conv2d(ch, ch, 3, stride=2, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(ch, 2 * config.latent_channels, 3, padding=1)]
        self.enc = nn.Sequential(*enc)
        dec = [nn.Conv2d(config.latent_channels, ch, 3, padding=1), nn.SiLU()]
        for _ in range(config.n_down):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(ch, config.image_channels, 3, padding=1)]
        self.dec = nn.Sequential(*dec)

    def _check_dims(self, image: torch.Tensor) -> None:
        f = self.config.downsample_factor
        if image.shape[-1] % f or image.shape[-2] % f:
            raise CodecError(
                f"spatial dims {tuple(image.shape[-2:])} not divisible by {f}"
            )

    def encode_dist(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Posterior (mu, logvar); learned mode only."""
        if self.config.mode != "learned":
            raise CodecError("encode_dist requires learned mode")
        self._check_dims(image)
        mu, logvar = torch.chunk(self.enc(image), 2, dim=1)
        return mu, torch.clamp(logvar, -30.0, 10.0)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """Image -> latent.  Identity mode returns the input unchanged."""
        if self.config.mode == "identity":
            return image
        return self.encode_dist(image)[0]

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        """Latent -> image.  Identity mode returns the input unchanged."""
        if self.config.mode == "identity":
            return latent
        return torch.sigmoid(self.dec(latent))

    def encode_diffusion(self, image: torch.Tensor) -> torch.Tensor:
        """Latent mapped into the roughly unit-scale diffusion space."""
        return (self.encode(image) - self.latent_shift) * self.latent_scale

    def decode_diffusion(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode(z / self.latent_scale + self.latent_shift)


def init_codec(config: CodecConfig, seed: int) -> Codec:
    codec = Codec(config)
    if config.mode == "identity":
        return codec
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in codec.named_parameters():
            if name.endswith(".bias"):
                p.zero_()
            else:
                fan_in = p.shape[1] * p[0][0].numel()
                p.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=gen)
    return codec


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Mean per-sample KL(N(mu, var) || N(0, 1)); always >= 0."""
    per_sample = -0.5 * torch.sum(1 + logvar - mu**2 - torch.exp(logvar), dim=[1, 2, 3])
    return per_sample.mean()


def codec_loss(codec: Codec, images: torch.Tensor, rng: torch.Generator) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, reconstruction MSE, KL) on one batch, posterior sampled."""
    mu, logvar = codec.encode_dist(images)
    z = mu + torch.exp(0.5 * logvar) * torch.empty_like(mu).normal_(generator=rng)
    recon = torch.sigmoid(codec.dec(z))
    rec_loss = torch.mean((recon - images) ** 2)
    kl = kl_divergence(mu, logvar)
    return rec_loss + codec.config.kl_weight * kl, rec_loss, kl


def calibrate_latent_stats(codec: Codec, images: torch.Tensor) -> None:
    """Record latent mean/std so diffusion sees roughly unit-scale inputs."""
    with torch.no_grad():
        z = codec.encode(images)
    codec.latent_shift = float(z.mean())
    std = float(z.std())
    codec.latent_scale = 1.0 / max(std, 1e-6)
