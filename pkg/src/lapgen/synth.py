"""Deterministic synthetic surgical-scene sandbox.

Renders labeled scenes: a smooth low-frequency organic background keyed to
the surgical phase, soft target blobs in per-target colors, and rigid tool
shapes in a reserved metallic palette.  The two palettes are disjoint by
construction — every organic color satisfies R >= G >= B with R - B >= 70,
every tool color has min channel >= 160 and channel spread <= 40 — so the
stored mask (exact tool coverage) is recoverable from pixels alone.

Each verb is realized as a fixed geometric relation between the tool tip and
its target blob:

    grasp     tip inside the blob (overlapping)
    retract   tip on the blob boundary (touching)
    dissect   tip ~2 px from the boundary   (near distance band)
    coagulate tip ~5 px from the boundary   (mid distance band)
    clip      tip ~8 px from the boundary   (far distance band)
    cut       tool axis +45 deg off the approach direction
    aspirate  tool axis +90 deg off the approach direction
    irrigate  tool axis -45 deg off the approach direction

Distances scale with image size (values above are for 32 px images).  All
randomness is derived per row from sha256(seed, row id), so generation is
order-independent and reproducible byte-for-byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .manifest import DatasetManifest, ManifestRow, assign_split, save_manifest
from .text import (
    ALLOWED_TRIPLETS,
    PHASES,
    TOOLS,
    TRIPLET_CLASSES,
    ActionTriplet,
    FrameLabel,
    PromptVariant,
    build_prompt,
    normalize_phase,
)

log = logging.getLogger(__name__)


class SceneError(ValueError):
    pass


# --------------------------------------------------------------------------
# Palettes.  Organic colors: R >= G >= B, R - B >= 70, R <= 245.
# Tool colors: min >= 160, spread <= 40.

PHASE_PALETTES: dict[str, tuple[tuple[int, int, int], tuple[int, int, int]]] = {
    "preparation": ((150, 70, 60), (190, 110, 80)),
    "carlot-triangle-dissection": ((170, 60, 50), (210, 120, 70)),
    "clipping-and-cutting": ((160, 80, 60), (200, 100, 90)),
    "gallbladder-dissection": ((180, 90, 50), (220, 150, 80)),
    "gallbladder-packaging": ((155, 75, 70), (195, 135, 90)),
    "cleaning-and-coagulation": ((145, 55, 45), (185, 95, 85)),
    "gallbladder-extraction": ((165, 85, 55), (205, 140, 100)),
}

TARGET_COLORS: dict[str, tuple[int, int, int]] = {
    "gallbladder": (170, 140, 60),
    "cystic_plate": (200, 160, 80),
    "cystic_duct": (230, 200, 90),
    "cystic_artery": (220, 70, 60),
    "cystic_pedicle": (190, 100, 70),
    "blood_vessel": (150, 40, 30),
    "fluid": (230, 170, 120),
    "abdominal_wall_cavity": (180, 120, 100),
    "liver": (140, 60, 50),
    "adhesion": (210, 180, 120),
    "omentum": (240, 190, 110),
    "peritoneum": (225, 150, 140),
    "gut": (205, 130, 90),
    "specimen_bag": (235, 215, 150),
}

TOOL_COLORS: dict[str, tuple[int, int, int]] = {
    "grasper": (200, 200, 205),
    "bipolar": (175, 180, 190),
    "hook": (210, 205, 195),
    "scissors": (190, 195, 200),
    "clipper": (220, 220, 220),
    "irrigator": (180, 185, 175),
}

VERB_RELATIONS: dict[str, dict] = {
    "grasp": {"kind": "overlap"},
    "retract": {"kind": "touch"},
    "dissect": {"kind": "dist", "gap": 2.0},
    "coagulate": {"kind": "dist", "gap": 5.0},
    "clip": {"kind": "dist", "gap": 8.0},
    "cut": {"kind": "orient", "offset": 45.0},
    "aspirate": {"kind": "orient", "offset": 90.0},
    "irrigate": {"kind": "orient", "offset": -45.0},
}


# --------------------------------------------------------------------------
# Geometry.  Primitives live in pixel coordinates; inclusion is evaluated at
# pixel centers (x + 0.5, y + 0.5) with no anti-aliasing.


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float


@dataclass(frozen=True)
class Poly:
    """Convex polygon; vertex winding may be either orientation."""

    vertices: tuple[tuple[float, float], ...]


Primitive = Circle | Poly


def _rect(x0: float, y0: float, x1: float, y1: float) -> Poly:
    return Poly(((x0, y0), (x1, y0), (x1, y1), (x0, y1)))


# Local tool silhouettes in 1/32-image units: tip near the origin, shaft
# running toward -x (so the shaft naturally exits the frame like a real
# instrument entering the scene).
def _tool_primitives_local(tool: str) -> list[Primitive]:
    if tool == "grasper":
        return [
            _rect(-18, -1.0, -2, 1.0),
            _rot_rect(-2, -0.55, 4.5, 0.55, pivot=(-2, 0), deg=22),
            _rot_rect(-2, -0.55, 4.5, 0.55, pivot=(-2, 0), deg=-22),
        ]
    if tool == "bipolar":
        return [_rect(-18, -0.9, -1.5, 0.9), Circle(0.3, 0.0, 2.0)]
    if tool == "hook":
        return [_rect(-18, -0.7, 0.6, 0.7), _rect(0.6, -3.2, 1.9, 0.7)]
    if tool == "scissors":
        return [
            _rot_rect(-6, -0.8, 4, 0.8, pivot=(-1, 0), deg=20),
            _rot_rect(-6, -0.8, 4, 0.8, pivot=(-1, 0), deg=-20),
            Circle(-1.0, 0.0, 1.2),
        ]
    if tool == "clipper":
        return [
            _rect(-18, -1.0, -4, 1.0),
            _rot_rect(-4, -0.9, 1.2, 0.9, pivot=(-4, 0), deg=35),
            _rot_rect(-4, -0.9, 1.2, 0.9, pivot=(-4, 0), deg=-35),
        ]
    if tool == "irrigator":
        return [
            _rect(-18, -1.3, -2, 1.3),
            _rect(-2, -0.8, 2.5, 0.8),
            Circle(2.5, 0.0, 0.9),
        ]
    raise SceneError(f"unknown tool {tool!r}")


def _rot_rect(x0, y0, x1, y1, pivot, deg) -> Poly:
    th = math.radians(deg)
    c, s = math.cos(th), math.sin(th)
    px, py = pivot
    pts = []
    for x, y in ((x0, y0), (x1, y0), (x1, y1), (x0, y1)):
        dx, dy = x - px, y - py
        pts.append((px + c * dx - s * dy, py + s * dx + c * dy))
    return Poly(tuple(pts))


def _transform(prims: list[Primitive], position, angle: float, scale: float) -> list[Primitive]:
    c, s = math.cos(angle), math.sin(angle)
    px, py = position
    out: list[Primitive] = []
    for prim in prims:
        if isinstance(prim, Circle):
            x = px + scale * (c * prim.cx - s * prim.cy)
            y = py + scale * (s * prim.cx + c * prim.cy)
            out.append(Circle(x, y, prim.r * scale))
        else:
            pts = tuple(
                (px + scale * (c * x - s * y), py + scale * (s * x + c * y))
                for x, y in prim.vertices
            )
            out.append(Poly(pts))
    return out


def tool_primitives(tool: str, position, angle: float, scale: float) -> list[Primitive]:
    """World-space primitives for one tool instance."""
    return _transform(_tool_primitives_local(tool), position, angle, scale)


def _poly_mask(poly: Poly, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    # All edge cross-products share a sign (convexity); either winding accepted.
    pos = np.ones_like(xx, dtype=bool)
    neg = np.ones_like(xx, dtype=bool)
    n = len(poly.vertices)
    for i in range(n):
        x0, y0 = poly.vertices[i]
        x1, y1 = poly.vertices[(i + 1) % n]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        pos &= cross >= 0
        neg &= cross <= 0
    return pos | neg


def primitives_mask(prims: list[Primitive], size: int) -> np.ndarray:
    """Boolean coverage at pixel centers for a primitive union."""
    ys, xs = np.mgrid[0:size, 0:size]
    xx = xs + 0.5
    yy = ys + 0.5
    cover = np.zeros((size, size), dtype=bool)
    for prim in prims:
        if isinstance(prim, Circle):
            cover |= (xx - prim.cx) ** 2 + (yy - prim.cy) ** 2 <= prim.r**2
        else:
            cover |= _poly_mask(prim, xx, yy)
    return cover


# --------------------------------------------------------------------------
# Scene specification


@dataclass(frozen=True)
class TargetBlob:
    target: str
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class ToolInstance:
    tool: str
    verb: str
    position: tuple[float, float]  # tip, pixels
    angle: float                   # radians, pointing direction
    scale: float


@dataclass(frozen=True)
class SceneSpec:
    """Scene description; tool_instances[i] acts on target_blobs[i]."""

    phase: str
    background_seed: int
    target_blobs: tuple[TargetBlob, ...] = ()
    tool_instances: tuple[ToolInstance, ...] = ()


def _background(size: int, phase: str, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    c1, c2 = (np.array(c, dtype=np.float64) for c in PHASE_PALETTES[phase])
    ys, xs = np.mgrid[0:size, 0:size]
    fields = []
    for _ in range(2):
        f = np.zeros((size, size))
        for _ in range(3):
            kx, ky = rng.uniform(-2.0, 2.0, 2)
            ph = rng.uniform(0.0, 2.0 * np.pi)
            f += rng.uniform(0.5, 1.0) * np.cos(2.0 * np.pi * (kx * xs + ky * ys) / size + ph)
        span = np.ptp(f)
        fields.append((f - f.min()) / (span if span > 0 else 1.0))
    mix, bright = fields
    img = c1[None, None] * (1.0 - mix[..., None]) + c2[None, None] * mix[..., None]
    return img * (0.93 + 0.14 * bright)[..., None]


def _composite_blob(img: np.ndarray, blob: TargetBlob) -> None:
    size = img.shape[0]
    ys, xs = np.mgrid[0:size, 0:size]
    d = np.hypot(xs + 0.5 - blob.center[0], ys + 0.5 - blob.center[1])
    alpha = np.clip(1.6 * (1.0 - d / blob.radius), 0.0, 1.0)[..., None]
    color = np.array(TARGET_COLORS[blob.target], dtype=np.float64)
    img[:] = img * (1.0 - alpha) + color[None, None] * alpha


def render_scene(spec: SceneSpec, image_size: int) -> tuple[np.ndarray, np.ndarray, FrameLabel]:
    """Rasterize a scene; returns (HxWx3 uint8, HxW uint8 {0,255}, label)."""
    if spec.phase not in PHASES:
        raise SceneError(f"unknown phase {spec.phase!r}")
    if len(spec.tool_instances) > len(spec.target_blobs):
        raise SceneError("every tool instance needs a paired target blob")
    for ti in spec.tool_instances:
        if ti.verb not in VERB_RELATIONS:
            raise SceneError(f"unknown verb {ti.verb!r}")
        x, y = ti.position
        if not (0.0 <= x < image_size and 0.0 <= y < image_size):
            raise SceneError(f"tool position {ti.position} outside image bounds")

    img = _background(image_size, spec.phase, spec.background_seed)
    for blob in spec.target_blobs:
        _composite_blob(img, blob)
    img_u8 = np.rint(np.clip(img, 0, 255)).astype(np.uint8)

    cover = np.zeros((image_size, image_size), dtype=bool)
    for ti in spec.tool_instances:
        prims = tool_primitives(ti.tool, ti.position, ti.angle, ti.scale)
        tool_cover = primitives_mask(prims, image_size)
        img_u8[tool_cover] = np.array(TOOL_COLORS[ti.tool], dtype=np.uint8)
        cover |= tool_cover
    mask = np.where(cover, 255, 0).astype(np.uint8)

    triplets = tuple(
        ActionTriplet(ti.tool, ti.verb, spec.target_blobs[i].target)
        for i, ti in enumerate(spec.tool_instances)
    )
    label = FrameLabel(
        triplets=triplets,
        phase=spec.phase,
        tools_present=frozenset(ti.tool for ti in spec.tool_instances),
    )
    return img_u8, mask, label


# --------------------------------------------------------------------------
# Scene sampling


def _unit(size: int) -> float:
    return size / 32.0


def _place_tip(center, dist: float, rng: np.random.Generator, size: int):
    """Tip position at the given distance from the blob center, kept in bounds."""
    base_phi = rng.uniform(0.0, 2.0 * math.pi)
    for k in range(32):
        phi = base_phi + k * (2.0 * math.pi / 32.0)
        p = (center[0] - dist * math.cos(phi), center[1] - dist * math.sin(phi))
        if 1.0 <= p[0] < size - 1.0 and 1.0 <= p[1] < size - 1.0:
            return p, phi
    # Center region sampling guarantees an admissible direction exists.
    raise SceneError(f"cannot place tool tip near {center} at distance {dist}")


def sample_scene_spec(
    rng: np.random.Generator,
    image_size: int,
    phase: str | None = None,
    n_actions: int = 1,
    toolless: bool = False,
) -> SceneSpec:
    """Draw a valid scene: phase, blobs, and verb-consistent tool placements."""
    u = _unit(image_size)
    phase = phase if phase is not None else PHASES[rng.integers(len(PHASES))]
    background_seed = int(rng.integers(0, 2**31 - 1))
    if toolless:
        blobs = tuple(
            TargetBlob(
                target=TRIPLET_CLASSES[rng.integers(len(TRIPLET_CLASSES))][2],
                center=(rng.uniform(9, image_size - 9), rng.uniform(9, image_size - 9)),
                radius=rng.uniform(4.0, 6.5) * u,
            )
            for _ in range(rng.integers(0, 3))
        )
        return SceneSpec(phase, background_seed, blobs, ())

    triplets: list[tuple[str, str, str]] = []
    while len(triplets) < n_actions:
        cand = TRIPLET_CLASSES[rng.integers(len(TRIPLET_CLASSES))]
        if all(cand[0] != t[0] for t in triplets):
            triplets.append(cand)

    lo, hi = 9.0 * u, image_size - 9.0 * u
    blobs: list[TargetBlob] = []
    tools: list[ToolInstance] = []
    for i, (tool, verb, target) in enumerate(triplets):
        if n_actions > 1:
            # keep multi-action scenes spatially separated: split along x
            half = (hi - lo) / 2.0
            x = rng.uniform(lo, lo + half) if i == 0 else rng.uniform(lo + half, hi)
            center = (x, rng.uniform(lo, hi))
        else:
            center = (rng.uniform(lo, hi), rng.uniform(lo, hi))
        radius = rng.uniform(4.0, 6.5) * u
        blobs.append(TargetBlob(target, center, radius))

        rel = VERB_RELATIONS[verb]
        offset = 0.0
        if rel["kind"] == "overlap":
            dist = 0.4 * radius
        elif rel["kind"] == "touch":
            dist = radius
        elif rel["kind"] == "dist":
            dist = radius + (rel["gap"] + rng.uniform(-0.5, 0.5)) * u
        else:
            dist = radius + 1.0 * u
            offset = math.radians(rel["offset"] + rng.uniform(-10.0, 10.0))
        pos, phi = _place_tip(center, dist, rng, image_size)
        tools.append(
            ToolInstance(
                tool=tool,
                verb=verb,
                position=pos,
                angle=phi + offset,
                scale=rng.uniform(1.1, 1.6) * u,
            )
        )
    return SceneSpec(phase, background_seed, tuple(blobs), tuple(tools))


# --------------------------------------------------------------------------
# Clips


def generate_clip(
    spec: SceneSpec,
    n_frames: int,
    motion_seed: int,
    image_size: int,
    max_step: float = 2.0,
) -> list[tuple[np.ndarray, np.ndarray, FrameLabel]]:
    """Animate the scene's tools along quadratic splines; label stays constant.

    Consecutive tip displacements are bounded by max_step (in 1/32-image
    units); positions that would leave the frame are clipped with a warning.
    """
    if n_frames < 1:
        raise SceneError("n_frames must be >= 1")
    u = _unit(image_size)
    step_px = max_step * u
    rng = np.random.default_rng(motion_seed)
    # Control offsets sized so the spline's frame-to-frame step stays bounded.
    reach = step_px * max(n_frames - 1, 1) / 2.0
    controls = []
    for _ in spec.tool_instances:
        d1 = rng.uniform(-1.0, 1.0, 2)
        d1 = d1 / max(np.linalg.norm(d1), 1e-9) * rng.uniform(0.3, 1.0) * reach
        d2 = rng.uniform(-1.0, 1.0, 2)
        d2 = d1 + d2 / max(np.linalg.norm(d2), 1e-9) * rng.uniform(0.3, 1.0) * reach
        dtheta = rng.uniform(-0.35, 0.35)
        controls.append((d1, d2, dtheta))

    frames = []
    clipped = False
    for k in range(n_frames):
        s = k / max(n_frames - 1, 1)
        moved = []
        for ti, (d1, d2, dth) in zip(spec.tool_instances, controls):
            p0 = np.array(ti.position)
            p1 = p0 + d1
            p2 = p0 + d2
            pos = (1 - s) ** 2 * p0 + 2 * (1 - s) * s * p1 + s**2 * p2
            lo, hi = 1.0, image_size - 1.001
            clipped_pos = np.clip(pos, lo, hi)
            if not np.array_equal(pos, clipped_pos):
                clipped = True
            moved.append(
                replace(ti, position=tuple(clipped_pos), angle=ti.angle + dth * s)
            )
        frames.append(render_scene(replace(spec, tool_instances=tuple(moved)), image_size))
    if clipped:
        warnings.warn("clip path left image bounds; positions were clipped")
    return frames


# --------------------------------------------------------------------------
# Dataset generation


@dataclass(frozen=True)
class SynthConfig:
    n_images: int
    image_size: int = 32
    variant_mix: tuple[float, float] = (0.5, 0.5)
    seed: int = 0
    toolless_fraction: float = 0.1
    two_tool_fraction: float = 0.25
    n_clips: int = 0
    clip_frames: int = 8
    max_clip_step: float = 2.0

    def __post_init__(self):
        a, b = self.variant_mix
        if a < 0 or b < 0 or abs(a + b - 1.0) > 1e-9:
            raise SceneError(f"variant_mix must be two fractions summing to 1, got {self.variant_mix}")
        if self.n_images < 1:
            raise SceneError("n_images must be >= 1")


def _hash_int(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _hash_rank(ids: list[str], tag: str) -> list[str]:
    return sorted(ids, key=lambda i: hashlib.sha256(f"{tag}:{i}".encode()).hexdigest())


def _save_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def load_mask(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"))


def _row_for(scene_id, img_rel, mask_rel, label, variant, video_id=None, frame_idx=None):
    return ManifestRow(
        id=scene_id,
        image_path=img_rel,
        mask_path=mask_rel,
        prompt=build_prompt(label, variant),
        prompt_variant=variant.value,
        phase=label.phase,
        triplets=tuple(t.as_tuple() for t in label.triplets)
        if variant is PromptVariant.TRIPLET_PHASE else (),
        tools_present=tuple(sorted(label.tools_present)),
        split=assign_split(scene_id, video_id),
        video_id=video_id,
        frame_idx=frame_idx,
    )


def generate_dataset(config: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Render the full dataset tree and manifest; byte-identical per config.

    The variant mix controls how many rows carry full triplet labels versus
    phase/tools-only labels; counts are exact (assignment ranks row ids by
    hash).  A toolless slice of the tools-only rows gets phase-only prompts
    and empty masks.
    """
    out = Path(out_dir)
    ids = [f"synth_{i:06d}" for i in range(config.n_images)]
    n_triplet = round(config.variant_mix[0] * config.n_images)
    triplet_ids = set(_hash_rank(ids, "variant")[:n_triplet])
    rest = [i for i in ids if i not in triplet_ids]
    n_toolless = round(config.toolless_fraction * len(rest))
    toolless_ids = set(_hash_rank(rest, "toolless")[:n_toolless])

    rows = []
    for scene_id in ids:
        rng = np.random.default_rng(_hash_int(config.seed, "scene", scene_id))
        toolless = scene_id in toolless_ids
        n_actions = 2 if (not toolless and rng.random() < config.two_tool_fraction) else 1
        spec = sample_scene_spec(rng, config.image_size, n_actions=n_actions, toolless=toolless)
        img, mask, label = render_scene(spec, config.image_size)
        img_rel = f"images/{scene_id}.png"
        mask_rel = f"masks/{scene_id}.png"
        _save_png(out / img_rel, img)
        _save_png(out / mask_rel, mask)
        if scene_id in triplet_ids and label.triplets:
            variant = PromptVariant.TRIPLET_PHASE
        elif label.tools_present:
            variant = PromptVariant.TOOLS_PHASE
        else:
            variant = PromptVariant.PHASE_ONLY
        rows.append(_row_for(scene_id, img_rel, mask_rel, label, variant))

    for j in range(config.n_clips):
        video_id = f"clip_{j:04d}"
        rng = np.random.default_rng(_hash_int(config.seed, "clip", video_id))
        spec = sample_scene_spec(rng, config.image_size, n_actions=1)
        frames = generate_clip(
            spec, config.clip_frames, motion_seed=_hash_int(config.seed, "motion", video_id),
            image_size=config.image_size, max_step=config.max_clip_step,
        )
        for k, (img, mask, label) in enumerate(frames):
            scene_id = f"{video_id}_f{k:03d}"
            img_rel = f"images/{scene_id}.png"
            mask_rel = f"masks/{scene_id}.png"
            _save_png(out / img_rel, img)
            _save_png(out / mask_rel, mask)
            rows.append(
                _row_for(scene_id, img_rel, mask_rel, label,
                         PromptVariant.TRIPLET_PHASE, video_id=video_id, frame_idx=k)
            )

    manifest = DatasetManifest(root=out, rows=rows)
    save_manifest(manifest, out / "manifest.jsonl")
    meta = {
        "config": {
            "n_images": config.n_images,
            "image_size": config.image_size,
            "variant_mix": list(config.variant_mix),
            "seed": config.seed,
            "toolless_fraction": config.toolless_fraction,
            "two_tool_fraction": config.two_tool_fraction,
            "n_clips": config.n_clips,
            "clip_frames": config.clip_frames,
            "max_clip_step": config.max_clip_step,
        },
        "n_rows": len(rows),
        "content_hash": dataset_content_hash(out),
    }
    (out / "dataset_meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest


def dataset_content_hash(root: str | Path) -> str:
    """sha256 over sorted relative paths and file bytes of the dataset tree."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.name != "dataset_meta.json":
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def filter_for_control(manifest: DatasetManifest) -> DatasetManifest:
    """Drop rows without a usable (non-empty) tool mask."""
    kept = []
    dropped = 0
    for row in manifest.rows:
        mask_file = manifest.mask_file(row)
        if mask_file is None or not mask_file.exists():
            dropped += 1
            continue
        if not (load_mask(mask_file) > 127).any():
            dropped += 1
            continue
        kept.append(row)
    log.info("control filter: kept %d rows, dropped %d tool-less", len(kept), dropped)
    if not kept:
        warnings.warn("control filter removed every row; no masks with tools found")
    return manifest.with_rows(kept)


# --------------------------------------------------------------------------
# External ingestion


@dataclass
class IngestSummary:
    n_rows: int = 0
    n_skipped: int = 0
    errors: list[str] = field(default_factory=list)


def ingest_external(
    image_dir: str | Path,
    label_file: str | Path,
    out_dir: str | Path,
    mask_dir: str | Path | None = None,
    image_size: int = 32,
) -> tuple[DatasetManifest, IngestSummary]:
    """Build a manifest from an external labeled frame set.

    label_file is a CSV with header ``frame_path,phase,tools,triplets``;
    multi-values are ';'-separated and triplets are encoded tool|verb|target.
    Malformed rows are skipped and reported with their line numbers; images
    are resized to image_size and re-encoded into out_dir.
    """
    image_dir = Path(image_dir)
    mask_dir = None if mask_dir is None else Path(mask_dir)
    out = Path(out_dir)
    summary = IngestSummary()
    rows: list[ManifestRow] = []

    label_path = Path(label_file)
    if not label_path.exists():
        raise FileNotFoundError(f"label file {label_path} does not exist")

    with open(label_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {
            "frame_path", "phase", "tools", "triplets",
        }:
            raise ValueError(
                f"label file must have columns frame_path,phase,tools,triplets; got {reader.fieldnames}"
            )
        for lineno, rec in enumerate(reader, 2):
            try:
                row = _ingest_row(rec, image_dir, mask_dir, out, image_size)
            except Exception as exc:
                summary.n_skipped += 1
                summary.errors.append(f"line {lineno}: {exc}")
                continue
            rows.append(row)
            summary.n_rows += 1

    if not rows:
        warnings.warn(f"ingestion produced an empty manifest ({summary.n_skipped} rows skipped)")
    if summary.errors:
        log.warning("ingestion skipped %d rows:\n%s", summary.n_skipped, "\n".join(summary.errors))
    manifest = DatasetManifest(root=out, rows=rows)
    save_manifest(manifest, out / "manifest.jsonl")
    return manifest, summary


def _ingest_row(rec, image_dir: Path, mask_dir: Path | None, out: Path, image_size: int) -> ManifestRow:
    frame_path = rec["frame_path"].strip()
    if not frame_path:
        raise ValueError("empty frame_path")
    src = image_dir / frame_path
    if not src.exists():
        raise FileNotFoundError(f"image {src} missing")
    phase = normalize_phase(rec["phase"])
    if phase is None:
        raise ValueError(f"unknown phase {rec['phase']!r}")

    tools = tuple(t.strip() for t in rec["tools"].split(";") if t.strip())
    for t in tools:
        if t not in TOOLS:
            raise ValueError(f"unknown tool {t!r}")
    triplets = []
    for part in rec["triplets"].split(";"):
        part = part.strip()
        if not part:
            continue
        bits = part.split("|")
        if len(bits) != 3:
            raise ValueError(f"bad triplet encoding {part!r}")
        triplets.append(ActionTriplet(*bits))

    tools_present = frozenset(tools) | frozenset(t.tool for t in triplets)
    label = FrameLabel(tuple(triplets), phase, tools_present)
    if label.triplets:
        variant = PromptVariant.TRIPLET_PHASE
    elif label.tools_present:
        variant = PromptVariant.TOOLS_PHASE
    else:
        variant = PromptVariant.PHASE_ONLY

    scene_id = "ext_" + frame_path.rsplit(".", 1)[0].replace("/", "_")
    img = Image.open(src).convert("RGB").resize((image_size, image_size), Image.BILINEAR)
    img_rel = f"images/{scene_id}.png"
    (out / "images").mkdir(parents=True, exist_ok=True)
    img.save(out / img_rel, format="PNG")

    mask_rel = None
    if mask_dir is not None:
        mask_src = mask_dir / frame_path
        if mask_src.exists():
            m = Image.open(mask_src).convert("L").resize((image_size, image_size), Image.NEAREST)
            mask_rel = f"masks/{scene_id}.png"
            (out / "masks").mkdir(parents=True, exist_ok=True)
            m.save(out / mask_rel, format="PNG")

    return _row_for(scene_id, img_rel, mask_rel, label, variant)


ORACLE_MIN_CHANNEL = 150
ORACLE_MAX_SPREAD = 50
