"""Line-oriented dataset manifest binding images, masks, prompts, and labels.

One JSON object per line (UTF-8, LF), paths relative to the manifest's
directory.  Row ids are unique; split assignment is stable under dataset
growth because it hashes the id alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .text import ActionTriplet, FrameLabel, PromptVariant


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRow:
    id: str
    image_path: str
    prompt: str
    prompt_variant: str
    phase: str
    mask_path: str | None = None
    triplets: tuple[tuple[str, str, str], ...] = ()
    tools_present: tuple[str, ...] = ()
    split: str = "train"
    video_id: str | None = None
    frame_idx: int | None = None

    def label(self) -> FrameLabel:
        return FrameLabel(
            triplets=tuple(ActionTriplet(*t) for t in self.triplets),
            phase=self.phase,
            tools_present=frozenset(self.tools_present),
        )

    def variant(self) -> PromptVariant:
        return PromptVariant(self.prompt_variant)


@dataclass
class DatasetManifest:
    root: Path
    rows: list[ManifestRow] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)

    def __len__(self) -> int:
        return len(self.rows)

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest(self.root, [r for r in self.rows if r.split == split])

    def with_rows(self, rows: list[ManifestRow]) -> "DatasetManifest":
        return DatasetManifest(self.root, rows)

    def image_file(self, row: ManifestRow) -> Path:
        return self.root / row.image_path

    def mask_file(self, row: ManifestRow) -> Path | None:
        return None if row.mask_path is None else self.root / row.mask_path

    def validate(self, require_masks: bool = False) -> None:
        seen: set[str] = set()
        for row in self.rows:
            if row.id in seen:
                raise ManifestError(f"duplicate row id {row.id!r}")
            seen.add(row.id)
            if not self.image_file(row).exists():
                raise ManifestError(f"row {row.id}: image {row.image_path} missing")
            mask = self.mask_file(row)
            if mask is not None and not mask.exists():
                raise ManifestError(f"row {row.id}: mask {row.mask_path} missing")
            if require_masks and mask is None:
                raise ManifestError(f"row {row.id}: mask required but absent")


def _row_to_json(row: ManifestRow) -> str:
    doc = asdict(row)
    doc["triplets"] = [list(t) for t in row.triplets]
    doc["tools_present"] = sorted(row.tools_present)
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [_row_to_json(r) for r in manifest.rows]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")
    rows = []
    for lineno, line in enumerate(path.read_text("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            doc["triplets"] = tuple(tuple(t) for t in doc.get("triplets", []))
            doc["tools_present"] = tuple(doc.get("tools_present", []))
            rows.append(ManifestRow(**doc))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: bad row ({exc})") from exc
    return DatasetManifest(root=path.parent, rows=rows)


def assign_split(row_id: str, video_id: str | None = None) -> str:
    """80/10/10 split, stable under growth: hashes the id (or clip id) alone."""
    key = video_id if video_id is not None else row_id
    bucket = int.from_bytes(hashlib.sha256(f"split:{key}".encode()).digest()[:4], "big") % 100
    if bucket < 80:
        return "train"
    if bucket < 90:
        return "val"
    return "test"
