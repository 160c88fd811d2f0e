"""Manifest rows to training tensors.

Desk-scale datasets fit in memory, so everything is loaded once into dense
tensors and batched by index.  Batch order comes from an explicit generator;
no worker pools, so runs are reproducible sample-for-sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .manifest import DatasetManifest, ManifestError
from .recognition import triplet_multi_hot
from .synth import load_image, load_mask
from .text import Vocab, tokenize


@dataclass
class ManifestTensors:
    images: torch.Tensor          # (N, 3, H, W) float32 in [0, 1]
    token_ids: torch.Tensor       # (N, L) int64
    masks: torch.Tensor | None    # (N, 1, H, W) float32 in {0, 1}
    triplet_targets: torch.Tensor  # (N, n_classes) float32 multi-hot
    has_triplets: torch.Tensor    # (N,) bool

    def __len__(self) -> int:
        return self.images.shape[0]


def load_tensors(
    manifest: DatasetManifest,
    vocab: Vocab,
    max_tokens: int = 16,
    require_masks: bool = False,
) -> ManifestTensors:
    if len(manifest) == 0:
        raise ManifestError("manifest has no rows")
    images, ids, masks, targets, has_trip = [], [], [], [], []
    any_mask = all(r.mask_path is not None for r in manifest.rows)
    if require_masks and not any_mask:
        raise ManifestError("rows without masks present; run the control filter first")
    for row in manifest.rows:
        img = load_image(manifest.image_file(row)).astype(np.float32) / 255.0
        images.append(torch.from_numpy(img).permute(2, 0, 1))
        ids.append(torch.tensor(tokenize(row.prompt, vocab, max_tokens), dtype=torch.long))
        if any_mask:
            m = (load_mask(manifest.mask_file(row)) > 127).astype(np.float32)
            masks.append(torch.from_numpy(m)[None])
        targets.append(torch.from_numpy(triplet_multi_hot(row.triplets)))
        has_trip.append(bool(row.triplets))
    return ManifestTensors(
        images=torch.stack(images),
        token_ids=torch.stack(ids),
        masks=torch.stack(masks) if any_mask else None,
        triplet_targets=torch.stack(targets),
        has_triplets=torch.tensor(has_trip, dtype=torch.bool),
    )


def batch_indices(n: int, batch_size: int, rng: torch.Generator) -> torch.Tensor:
    """One random batch of row indices (with replacement across steps)."""
    return torch.randint(0, n, (min(batch_size, n),), generator=rng)
