"""End-to-end evaluation of a generated image set against real rows.

The generation step writes a directory of images plus ``gen_meta.json``
pairing every generated file with a real manifest row (same prompt, and the
same conditioning mask when spatial control is evaluated).  This module
recomputes nothing about generation; it loads both sides, extracts features,
and fills a MetricReport with the four fidelity metrics, mask-adherence F1,
and triplet-recognition mAP.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .manifest import DatasetManifest
from .metrics import (
    MetricError,
    cmmd,
    extract_features,
    fit_gaussian,
    frechet_distance,
    kid,
    mean_ap,
    pixel_f1,
)
from .recognition import TripletClassifier, classify, oracle_segment
from .synth import load_image, load_mask
from .text import TRIPLET_CLASSES


@dataclass
class MetricReport:
    cmmd: float
    clip_fid_style: float
    fid: float
    kid: float
    n_real: int
    n_generated: int
    extractor_id: str
    clip_extractor_id: str
    config_hash: str
    seed: int
    pixel_f1: float | None = None
    action_map: float | None = None
    map_classes_included: int | None = None
    map_classes_skipped: int | None = None

    def __post_init__(self):
        for name in ("cmmd", "clip_fid_style", "fid", "kid"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise MetricError(f"metric {name} is non-finite: {v}")
        if self.fid < 0:
            raise MetricError(f"fid must be >= 0, got {self.fid}")
        for name in ("pixel_f1", "action_map"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise MetricError(f"{name} must lie in [0, 1], got {v}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class EvalSettings:
    extractor_id: str = "desk64"
    clip_extractor_id: str = "desk64"
    cmmd_sigma: float = 10.0
    cmmd_scale: float = 1000.0
    config_hash: str = ""
    seed: int = 0


def write_generation_meta(
    out_dir: str | Path,
    pairs: list[dict],
    seed: int,
    config_hash: str,
    with_masks: bool,
) -> None:
    doc = {"pairs": pairs, "seed": seed, "config_hash": config_hash, "with_masks": with_masks}
    Path(out_dir, "gen_meta.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def evaluate_generation(
    real_manifest: DatasetManifest,
    generated_dir: str | Path,
    settings: EvalSettings,
    classifier: TripletClassifier | None = None,
) -> MetricReport:
    """Score a generated set against its paired real rows.

    Raises on pairing mismatches (unknown row ids or prompt disagreement)
    rather than silently scoring a misaligned set.
    """
    generated_dir = Path(generated_dir)
    meta_path = generated_dir / "gen_meta.json"
    if not meta_path.exists():
        raise MetricError(f"{meta_path} missing; not a generated set")
    meta = json.loads(meta_path.read_text("utf-8"))
    by_id = {row.id: row for row in real_manifest.rows}

    real_images, gen_images, rows = [], [], []
    for pair in meta["pairs"]:
        row = by_id.get(pair["row_id"])
        if row is None:
            raise MetricError(f"pairing mismatch: unknown row id {pair['row_id']!r}")
        if row.prompt != pair["prompt"]:
            raise MetricError(
                f"pairing mismatch for {row.id}: prompt {pair['prompt']!r} != {row.prompt!r}"
            )
        gen_path = generated_dir / pair["image"]
        if not gen_path.exists():
            raise MetricError(f"generated image {gen_path} missing")
        rows.append(row)
        real_images.append(load_image(real_manifest.image_file(row)))
        gen_images.append(load_image(gen_path))

    if len(rows) < 2:
        raise MetricError("need at least 2 pairs to evaluate")

    real_feat = extract_features(real_images, settings.extractor_id)
    gen_feat = extract_features(gen_images, settings.extractor_id)
    fid = frechet_distance(fit_gaussian(real_feat), fit_gaussian(gen_feat))
    kid_val = kid(real_feat, gen_feat)
    if settings.clip_extractor_id == settings.extractor_id:
        clip_real, clip_gen = real_feat, gen_feat
    else:
        clip_real = extract_features(real_images, settings.clip_extractor_id)
        clip_gen = extract_features(gen_images, settings.clip_extractor_id)
    clip_fid = frechet_distance(fit_gaussian(clip_real), fit_gaussian(clip_gen))
    cmmd_val = cmmd(clip_real, clip_gen, sigma=settings.cmmd_sigma, scale=settings.cmmd_scale)

    f1_val = None
    if meta.get("with_masks"):
        f1s = []
        for row, gen_img in zip(rows, gen_images):
            gt = load_mask(real_manifest.mask_file(row))
            f1s.append(pixel_f1(oracle_segment(gen_img, warn=False), gt))
        f1_val = float(np.mean(f1s))

    map_val = included = skipped = None
    if classifier is not None:
        map_val, included, skipped = action_map_over_rows(classifier, rows, gen_images)

    return MetricReport(
        cmmd=cmmd_val,
        clip_fid_style=clip_fid,
        fid=fid,
        kid=kid_val,
        n_real=len(real_images),
        n_generated=len(gen_images),
        extractor_id=settings.extractor_id,
        clip_extractor_id=settings.clip_extractor_id,
        config_hash=settings.config_hash,
        seed=settings.seed,
        pixel_f1=f1_val,
        action_map=map_val,
        map_classes_included=included,
        map_classes_skipped=skipped,
    )


def action_map_over_rows(classifier: TripletClassifier, rows, images) -> tuple[float, int, int]:
    """mAP of triplet recognition over rows that carry triplet labels."""
    labeled = [(row, img) for row, img in zip(rows, images) if row.triplets]
    if not labeled:
        raise MetricError("no triplet-labeled rows among the evaluated pairs")
    batch = torch.stack([
        torch.from_numpy(np.asarray(img).astype(np.float32) / 255.0).permute(2, 0, 1)
        for _, img in labeled
    ])
    scores = classify(classifier, batch)
    per_class = []
    for j, cls in enumerate(TRIPLET_CLASSES):
        labels = np.array([1 if cls in {tuple(t) for t in row.triplets} else 0
                           for row, _ in labeled])
        per_class.append((scores[:, j], labels))
    result = mean_ap(per_class)
    return result.value, result.n_classes, result.n_skipped


def report_table(report: MetricReport) -> str:
    """Human-readable summary shaped like the standard fidelity table."""
    headers = ["CMMD↓", "CLIP-FID↓", "FID↓", "KID↓", "action mAP↑"]
    values = [
        f"{report.cmmd:.4f}",
        f"{report.clip_fid_style:.3f}",
        f"{report.fid:.3f}",
        f"{report.kid:.5f}",
        "-" if report.action_map is None else f"{report.action_map:.4f}",
    ]
    w = [max(len(h), len(v)) for h, v in zip(headers, values)]
    lines = [
        "  ".join(h.ljust(k) for h, k in zip(headers, w)),
        "  ".join(v.ljust(k) for v, k in zip(values, w)),
    ]
    if report.pixel_f1 is not None:
        lines.append(f"pixel F1: {report.pixel_f1:.4f}")
    lines.append(
        f"(n_real={report.n_real}, n_generated={report.n_generated}, "
        f"extractor={report.extractor_id}, seed={report.seed})"
    )
    return "\n".join(lines)
