"""Checkpoint container: torch payload plus a JSON sidecar.

Every trained artifact (denoiser + text encoder, control branch, codec,
classifier) is stored as ``<name>.pt`` with a ``<name>.json`` sidecar holding
config, seed, step, a metric snapshot, and a content hash.  The hash covers
the model parameter bytes in canonical order (independent of serialization
details), so downstream stages can verify exactly which weights they consume.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import torch

FORMAT_VERSION = 1


class MissingArtifactError(FileNotFoundError):
    """A required upstream artifact is absent or fails hash verification."""


def state_content_hash(states: dict[str, dict[str, torch.Tensor]]) -> str:
    """sha256 over (name, dtype, shape, raw bytes) of all model tensors."""
    h = hashlib.sha256()
    for model_name in sorted(states):
        for key in sorted(states[model_name]):
            t = states[model_name][key].detach().cpu().contiguous()
            h.update(model_name.encode())
            h.update(key.encode())
            h.update(str(t.dtype).encode())
            h.update(str(tuple(t.shape)).encode())
            h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(
    path: str | Path,
    states: dict[str, dict[str, torch.Tensor]],
    sidecar: dict[str, Any],
    extra: dict[str, Any] | None = None,
) -> str:
    """Write payload + sidecar; returns the content hash.

    ``states`` maps model names to state dicts (hashed); ``extra`` carries
    resumable training state (optimizer, rng) excluded from the hash.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    content_hash = state_content_hash(states)
    torch.save({"states": states, "extra": extra or {}}, path)
    doc = dict(sidecar)
    doc["format_version"] = FORMAT_VERSION
    doc["content_hash"] = content_hash
    path.with_suffix(".json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return content_hash


def load_checkpoint(path: str | Path, expect_hash: str | None = None):
    """Read (states, extra, sidecar); verifies content hash matches the sidecar."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint {path} does not exist")
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise MissingArtifactError(f"checkpoint sidecar {sidecar_path} does not exist")
    payload = torch.load(path, weights_only=False)
    sidecar = json.loads(sidecar_path.read_text("utf-8"))
    actual = state_content_hash(payload["states"])
    if actual != sidecar.get("content_hash"):
        raise MissingArtifactError(
            f"checkpoint {path}: content hash {actual} != sidecar {sidecar.get('content_hash')}"
        )
    if expect_hash is not None and actual != expect_hash:
        raise MissingArtifactError(
            f"checkpoint {path}: content hash {actual} != expected {expect_hash}"
        )
    return payload["states"], payload["extra"], sidecar
