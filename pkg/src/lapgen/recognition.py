"""Tool segmentation oracle and the toy action-triplet classifier.

The oracle exploits the sandbox palette split: tool pixels are metallic
(bright, low channel spread) and everything organic is strongly red-dominant,
so a per-pixel color test recovers the exact tool mask on rendered scenes.
On off-palette inputs (e.g. diffusion outputs) it degrades to a best-effort
mask and attaches a warning when many pixels sit near the decision boundary.

The classifier is a small position-aware CNN with multi-label sigmoid
outputs over the registered triplet classes.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .text import TRIPLET_CLASSES

TOOL_MIN_CHANNEL = 150
TOOL_MAX_SPREAD = 50


class OffPaletteWarning(UserWarning):
    """Input colors stray from the sandbox palette; mask is best-effort."""


def oracle_segment(image: np.ndarray, warn: bool = True) -> np.ndarray:
    """Per-pixel tool mask from the reserved metallic palette region.

    image: HxWx3 uint8.  Returns HxW uint8 in {0, 255}.
    """
    img = np.asarray(image).astype(np.int16)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {img.shape}")
    mn = img.min(axis=2)
    spread = img.max(axis=2) - mn
    tool = (mn >= TOOL_MIN_CHANNEL) & (spread <= TOOL_MAX_SPREAD)
    if warn:
        near = ((spread > 40) & (spread < 63) & (mn >= 135)) | (
            (mn >= 135) & (mn < 160) & (spread <= 40)
        )
        if near.mean() > 0.01:
            warnings.warn(
                f"{near.mean():.1%} of pixels near the tool-palette boundary; "
                "mask is best-effort",
                OffPaletteWarning,
            )
    return np.where(tool, 255, 0).astype(np.uint8)


@dataclass(frozen=True)
class ClassifierConfig:
    image_size: int = 32
    base_channels: int = 32
    hidden: int = 256
    n_classes: int = len(TRIPLET_CLASSES)


class TripletClassifier(nn.Module):
    """Three stride-2 conv blocks, flattened (position-aware), two linear layers."""

    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        self.conv1 = nn.Conv2d(3, c, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.gn1 = nn.GroupNorm(8, c)
        self.gn2 = nn.GroupNorm(8, 2 * c)
        self.gn3 = nn.GroupNorm(8, 2 * c)
        flat = 2 * c * (config.image_size // 8) ** 2
        self.fc1 = nn.Linear(flat, config.hidden)
        self.fc2 = nn.Linear(config.hidden, config.n_classes)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        # images: (B, 3, H, W) float in [0, 1] -> logits (B, n_classes)
        h = F.silu(self.gn1(self.conv1(images)))
        h = F.silu(self.gn2(self.conv2(h)))
        h = F.silu(self.gn3(self.conv3(h)))
        h = F.silu(self.fc1(h.flatten(1)))
        return self.fc2(h)


def init_classifier(config: ClassifierConfig, seed: int) -> TripletClassifier:
    net = TripletClassifier(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith(".bias") or "gn" in name:
                if p.dim() == 1 and name.endswith(".weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
            else:
                fan_in = p.shape[1] * (p[0][0].numel() if p.dim() > 2 else 1)
                p.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=gen)
    return net


def classify(classifier: TripletClassifier, images: torch.Tensor) -> np.ndarray:
    """Per-triplet sigmoid scores; images (B, 3, H, W) in [0, 1]."""
    classifier.eval()
    with torch.no_grad():
        return torch.sigmoid(classifier(images)).numpy().astype(np.float64)


def triplet_multi_hot(triplets: tuple[tuple[str, str, str], ...]) -> np.ndarray:
    """Multi-hot target vector over the registered triplet classes."""
    vec = np.zeros(len(TRIPLET_CLASSES), dtype=np.float32)
    for t in triplets:
        vec[TRIPLET_CLASSES.index(tuple(t))] = 1.0
    return vec
