"""Training loops for the three trainable stages and the eval classifier.

All loops share one discipline: a single explicit torch.Generator drives
batching, timesteps, noise, and context dropout, and its state is saved in
every checkpoint together with the optimizer, so a resumed run continues the
exact trajectory of an uninterrupted one.  A non-finite loss aborts with a
diagnostic rather than silently continuing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from . import diffusion
from .checkpoint import load_checkpoint, save_checkpoint, state_content_hash
from .codec import Codec, CodecConfig, calibrate_latent_stats, codec_loss, init_codec
from .control import ControlBranch, controlled_denoise, init_from_base
from .data import ManifestTensors, batch_indices, load_tensors
from .denoiser import Denoiser, DenoiserConfig, init_denoiser
from .manifest import DatasetManifest, ManifestError
from .metrics import NumericalError
from .recognition import ClassifierConfig, TripletClassifier, init_classifier
from .text import (
    MAX_TOKENS,
    TextEncoder,
    TextEncoderConfig,
    Vocab,
    build_vocab,
    init_text_encoder,
    null_token_ids,
)

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    checkpoint_path: Path
    content_hash: str
    losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def _check_finite(loss: torch.Tensor, step: int, stage: str) -> None:
    if not torch.isfinite(loss):
        raise NumericalError(
            f"{stage}: non-finite loss {float(loss)} at step {step}; "
            "lower the learning rate or check the data"
        )


def _dropout_ids(ids: torch.Tensor, vocab: Vocab, p: float, rng: torch.Generator) -> torch.Tensor:
    """Replace whole token rows by the null-context sequence with probability p."""
    if p <= 0:
        return ids
    drop = torch.rand(ids.shape[0], generator=rng) < p
    if not drop.any():
        return ids
    out = ids.clone()
    out[drop] = torch.tensor(null_token_ids(vocab, ids.shape[1]), dtype=torch.long)
    return out


# --------------------------------------------------------------------------
# Stage 1: text-conditioned denoiser


@dataclass(frozen=True)
class Stage1Config:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-4
    trainable_text: bool = False
    context_dropout: float = 0.1
    checkpoint_every: int = 1000
    epochs: int | None = None  # when set, steps = epochs * ceil(n/batch)


def resolve_steps(steps: int, epochs: int | None, n_rows: int, batch_size: int) -> int:
    if epochs is None:
        return steps
    return epochs * -(-n_rows // batch_size)


def train_diffusion(
    manifest: DatasetManifest,
    schedule: diffusion.NoiseSchedule,
    denoiser_config: DenoiserConfig,
    cfg: Stage1Config,
    seed: int,
    out_path: str | Path,
    codec: Codec | None = None,
    resume: str | Path | None = None,
) -> TrainResult:
    """Epsilon-MSE training of the denoiser (+ text encoder when trainable)."""
    vocab = build_vocab()
    codec = codec if codec is not None else init_codec(CodecConfig(mode="identity"), seed)
    tensors = load_tensors(manifest, vocab, MAX_TOKENS)
    n_steps = resolve_steps(cfg.steps, cfg.epochs, len(tensors), cfg.batch_size)

    denoiser = init_denoiser(denoiser_config, seed)
    text_cfg = TextEncoderConfig(vocab_size=len(vocab), context_dim=denoiser_config.context_dim)
    text_encoder = init_text_encoder(text_cfg, seed + 1)
    params = list(denoiser.parameters())
    if cfg.trainable_text:
        params += list(text_encoder.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    rng = torch.Generator().manual_seed(seed)
    losses: list[float] = []
    start = 0

    if resume is not None:
        states, extra, _ = load_checkpoint(resume)
        denoiser.load_state_dict(states["denoiser"])
        text_encoder.load_state_dict(states["text_encoder"])
        opt.load_state_dict(extra["optimizer"])
        rng.set_state(extra["rng_state"])
        start = extra["step"]
        losses = list(extra["losses"])

    sidecar_base = {
        "kind": "diffusion",
        "seed": seed,
        "denoiser_config": _denoiser_config_doc(denoiser_config),
        "text_config": {"vocab_size": len(vocab), "context_dim": text_cfg.context_dim,
                        "max_tokens": text_cfg.max_tokens},
        "schedule": {"T": schedule.T, "beta_start": float(schedule.betas[0]),
                     "beta_end": float(schedule.betas[-1])},
        "trainable_text": cfg.trainable_text,
    }

    def emit(step: int) -> str:
        return save_checkpoint(
            out_path,
            {"denoiser": denoiser.state_dict(), "text_encoder": text_encoder.state_dict()},
            {**sidecar_base, "step": step,
             "metrics": {"final_loss": losses[-1] if losses else None}},
            extra={"optimizer": opt.state_dict(), "rng_state": rng.get_state(),
                   "step": step, "losses": losses},
        )

    with_grad_text = cfg.trainable_text
    for step in range(start, n_steps):
        idx = batch_indices(len(tensors), cfg.batch_size, rng)
        imgs = tensors.images[idx]
        with torch.no_grad():
            x0 = codec.encode_diffusion(imgs)
        t = torch.randint(0, schedule.T, (imgs.shape[0],), generator=rng)
        eps = torch.empty_like(x0).normal_(generator=rng)
        x_t = diffusion.q_sample_batch(x0, t, eps, schedule)
        ids = _dropout_ids(tensors.token_ids[idx], vocab, cfg.context_dropout, rng)
        context = text_encoder(ids) if with_grad_text else _frozen_encode(text_encoder, ids)
        eps_pred = denoiser(x_t, t, context)
        loss = diffusion.training_loss(eps_pred, eps)
        _check_finite(loss, step, "stage1")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss))
        if (step + 1) % cfg.checkpoint_every == 0 and step + 1 < n_steps:
            emit(step + 1)
        if (step + 1) % 500 == 0:
            log.info("stage1 step %d/%d loss %.4f", step + 1, n_steps, losses[-1])

    content_hash = emit(n_steps)
    return TrainResult(Path(out_path), content_hash, losses)


def _frozen_encode(encoder: TextEncoder, ids: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return encoder(ids)


def _denoiser_config_doc(cfg: DenoiserConfig) -> dict:
    return {
        "in_channels": cfg.in_channels,
        "base_channels": cfg.base_channels,
        "channel_mults": list(cfg.channel_mults),
        "attn_levels": None if cfg.attn_levels is None else list(cfg.attn_levels),
        "time_embed_dim": cfg.time_embed_dim,
        "context_dim": cfg.context_dim,
        "groups": cfg.groups,
    }


def denoiser_config_from_doc(doc: dict) -> DenoiserConfig:
    return DenoiserConfig(
        in_channels=doc["in_channels"],
        base_channels=doc["base_channels"],
        channel_mults=tuple(doc["channel_mults"]),
        attn_levels=None if doc["attn_levels"] is None else tuple(doc["attn_levels"]),
        time_embed_dim=doc["time_embed_dim"],
        context_dim=doc["context_dim"],
        groups=doc["groups"],
    )


def load_diffusion_checkpoint(path: str | Path):
    """(denoiser, text_encoder, schedule, vocab, sidecar) from a stage-1 artifact."""
    states, _, sidecar = load_checkpoint(path)
    dcfg = denoiser_config_from_doc(sidecar["denoiser_config"])
    denoiser = Denoiser(dcfg)
    denoiser.load_state_dict(states["denoiser"])
    tdoc = sidecar["text_config"]
    text_encoder = TextEncoder(TextEncoderConfig(
        vocab_size=tdoc["vocab_size"], context_dim=tdoc["context_dim"],
        max_tokens=tdoc["max_tokens"],
    ))
    text_encoder.load_state_dict(states["text_encoder"])
    sdoc = sidecar["schedule"]
    schedule = diffusion.build_schedule(sdoc["T"], sdoc["beta_start"], sdoc["beta_end"])
    return denoiser, text_encoder, schedule, build_vocab(), sidecar


# --------------------------------------------------------------------------
# Stage 2: control branch over a frozen base


@dataclass(frozen=True)
class Stage2Config:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-4
    context_dropout: float = 0.1  # mirrors stage 1; no stated convention
    checkpoint_every: int = 1000
    epochs: int | None = None


def train_control(
    base_ckpt: str | Path,
    manifest: DatasetManifest,
    cfg: Stage2Config,
    seed: int,
    out_path: str | Path,
    codec: Codec | None = None,
    resume: str | Path | None = None,
) -> TrainResult:
    """Train only the branch; the base denoiser and text encoder stay frozen.

    The manifest must already be control-filtered (every row has a mask with
    tool pixels).
    """
    for row in manifest.rows:
        if row.mask_path is None:
            raise ManifestError(f"row {row.id} has no mask; run filter_for_control")
    denoiser, text_encoder, schedule, vocab, base_sidecar = load_diffusion_checkpoint(base_ckpt)
    base_hash = state_content_hash(
        {"denoiser": denoiser.state_dict(), "text_encoder": text_encoder.state_dict()}
    )
    denoiser.requires_grad_(False)
    text_encoder.requires_grad_(False)
    codec = codec if codec is not None else init_codec(CodecConfig(mode="identity"), seed)
    tensors = load_tensors(manifest, vocab, MAX_TOKENS, require_masks=True)
    n_steps = resolve_steps(cfg.steps, cfg.epochs, len(tensors), cfg.batch_size)

    branch = init_from_base(denoiser, seed)
    opt = torch.optim.Adam(branch.parameters(), lr=cfg.lr)
    rng = torch.Generator().manual_seed(seed)
    losses: list[float] = []
    start = 0
    if resume is not None:
        states, extra, _ = load_checkpoint(resume)
        branch.load_state_dict(states["branch"])
        opt.load_state_dict(extra["optimizer"])
        rng.set_state(extra["rng_state"])
        start = extra["step"]
        losses = list(extra["losses"])

    sidecar_base = {
        "kind": "control",
        "seed": seed,
        "base_hash": base_hash,
        "base_checkpoint": str(base_ckpt),
        "context_dropout": cfg.context_dropout,
    }

    def emit(step: int) -> str:
        return save_checkpoint(
            out_path,
            {"branch": branch.state_dict()},
            {**sidecar_base, "step": step,
             "metrics": {"final_loss": losses[-1] if losses else None}},
            extra={"optimizer": opt.state_dict(), "rng_state": rng.get_state(),
                   "step": step, "losses": losses},
        )

    for step in range(start, n_steps):
        idx = batch_indices(len(tensors), cfg.batch_size, rng)
        imgs = tensors.images[idx]
        masks = tensors.masks[idx]
        with torch.no_grad():
            x0 = codec.encode_diffusion(imgs)
        t = torch.randint(0, schedule.T, (imgs.shape[0],), generator=rng)
        eps = torch.empty_like(x0).normal_(generator=rng)
        x_t = diffusion.q_sample_batch(x0, t, eps, schedule)
        ids = _dropout_ids(tensors.token_ids[idx], vocab, cfg.context_dropout, rng)
        with torch.no_grad():
            context = text_encoder(ids)
        eps_pred = controlled_denoise(denoiser, branch, x_t, t, context, masks)
        loss = diffusion.training_loss(eps_pred, eps)
        _check_finite(loss, step, "stage2")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss))
        if (step + 1) % cfg.checkpoint_every == 0 and step + 1 < n_steps:
            emit(step + 1)
        if (step + 1) % 500 == 0:
            log.info("stage2 step %d/%d loss %.4f", step + 1, n_steps, losses[-1])

    content_hash = emit(n_steps)
    return TrainResult(Path(out_path), content_hash, losses)


def load_control_checkpoint(path: str | Path, base: Denoiser, expect_base_hash: str | None = None):
    states, _, sidecar = load_checkpoint(path)
    branch = ControlBranch(base, seed=0)
    branch.load_state_dict(states["branch"])
    return branch, sidecar


# --------------------------------------------------------------------------
# Codec training


@dataclass(frozen=True)
class CodecTrainConfig:
    codec: CodecConfig = CodecConfig(mode="learned")
    steps: int = 1200
    batch_size: int = 16
    lr: float = 2e-3
    checkpoint_every: int = 600


def train_codec(
    manifest: DatasetManifest,
    cfg: CodecTrainConfig,
    seed: int,
    out_path: str | Path,
) -> TrainResult:
    """Reconstruction + KL training of the learned codec."""
    if cfg.codec.mode != "learned":
        raise ValueError("identity codec has nothing to train")
    vocab = build_vocab()
    tensors = load_tensors(manifest, vocab, MAX_TOKENS)
    codec = init_codec(cfg.codec, seed)
    opt = torch.optim.Adam(codec.parameters(), lr=cfg.lr)
    rng = torch.Generator().manual_seed(seed)
    losses: list[float] = []
    kls: list[float] = []

    for step in range(cfg.steps):
        idx = batch_indices(len(tensors), cfg.batch_size, rng)
        total, rec, kl = codec_loss(codec, tensors.images[idx], rng)
        _check_finite(total, step, "codec")
        opt.zero_grad()
        total.backward()
        opt.step()
        losses.append(float(total))
        kls.append(float(kl))

    calibrate_latent_stats(codec, tensors.images[: min(len(tensors), 256)])
    content_hash = save_checkpoint(
        out_path,
        {"codec": codec.state_dict()},
        {"kind": "codec", "seed": seed, "step": cfg.steps,
         "codec_config": {
             "mode": cfg.codec.mode, "downsample_factor": cfg.codec.downsample_factor,
             "latent_channels": cfg.codec.latent_channels, "kl_weight": cfg.codec.kl_weight,
             "image_channels": cfg.codec.image_channels,
             "hidden_channels": cfg.codec.hidden_channels,
         },
         "latent_shift": codec.latent_shift, "latent_scale": codec.latent_scale,
         "metrics": {"final_loss": losses[-1], "final_kl": kls[-1]}},
        extra={"losses": losses, "kls": kls},
    )
    return TrainResult(Path(out_path), content_hash, losses)


def load_codec_checkpoint(path: str | Path) -> Codec:
    states, _, sidecar = load_checkpoint(path)
    doc = sidecar["codec_config"]
    codec = Codec(CodecConfig(
        mode=doc["mode"], downsample_factor=doc["downsample_factor"],
        latent_channels=doc["latent_channels"], kl_weight=doc["kl_weight"],
        image_channels=doc["image_channels"], hidden_channels=doc["hidden_channels"],
    ))
    codec.load_state_dict(states["codec"])
    codec.latent_shift = sidecar["latent_shift"]
    codec.latent_scale = sidecar["latent_scale"]
    return codec


# --------------------------------------------------------------------------
# Triplet classifier


@dataclass(frozen=True)
class ClassifierTrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    base_channels: int = 32
    hidden: int = 256


def train_triplet_classifier(
    manifest: DatasetManifest,
    cfg: ClassifierTrainConfig,
    seed: int,
    out_path: str | Path,
) -> TrainResult:
    """BCE training on triplet-labeled rows only."""
    vocab = build_vocab()
    tensors = load_tensors(manifest, vocab, MAX_TOKENS)
    keep = tensors.has_triplets.nonzero(as_tuple=True)[0]
    if keep.numel() == 0:
        raise ManifestError("manifest has no triplet-labeled rows")
    images = tensors.images[keep]
    targets = tensors.triplet_targets[keep]

    ccfg = ClassifierConfig(
        image_size=images.shape[-1], base_channels=cfg.base_channels, hidden=cfg.hidden,
    )
    net = init_classifier(ccfg, seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    rng = torch.Generator().manual_seed(seed)
    bce = nn.BCEWithLogitsLoss()
    losses: list[float] = []
    for step in range(cfg.steps):
        idx = batch_indices(images.shape[0], cfg.batch_size, rng)
        loss = bce(net(images[idx]), targets[idx])
        _check_finite(loss, step, "classifier")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss))

    content_hash = save_checkpoint(
        out_path,
        {"classifier": net.state_dict()},
        {"kind": "classifier", "seed": seed, "step": cfg.steps,
         "classifier_config": {
             "image_size": ccfg.image_size, "base_channels": ccfg.base_channels,
             "hidden": ccfg.hidden, "n_classes": ccfg.n_classes,
         },
         "metrics": {"final_loss": losses[-1]}},
        extra={"losses": losses},
    )
    return TrainResult(Path(out_path), content_hash, losses)


def load_classifier_checkpoint(path: str | Path) -> TripletClassifier:
    states, _, sidecar = load_checkpoint(path)
    doc = sidecar["classifier_config"]
    net = TripletClassifier(ClassifierConfig(
        image_size=doc["image_size"], base_channels=doc["base_channels"],
        hidden=doc["hidden"], n_classes=doc["n_classes"],
    ))
    net.load_state_dict(states["classifier"])
    return net
