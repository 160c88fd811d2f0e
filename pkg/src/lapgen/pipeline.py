"""Stage orchestration over one run directory.

Stages: synth -> [train-codec] -> train-diffusion -> train-control ->
sample/evaluate, plus the eval classifier.  Every stage acquires the run
lock, verifies its declared inputs exist and hash-match, and leaves a stage
record (inputs, outputs, seed, wall time, status).  Generated artifacts
carry metadata sufficient to reproduce them exactly.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import training
from .checkpoint import MissingArtifactError, load_checkpoint, state_content_hash
from .codec import CodecConfig, init_codec
from .config import RunConfig, config_hash
from .control import ControlBranch
from .diffusion import SamplerConfig
from .evaluation import (
    EvalSettings,
    MetricReport,
    evaluate_generation,
    report_table,
    write_generation_meta,
)
from .manifest import DatasetManifest, load_manifest
from .sampling import GenerationModels, sample_frames, sample_image_batch, to_uint8
from .synth import SynthConfig, filter_for_control, generate_dataset, load_mask
from .text import parse_prompt
from .training import (
    CodecTrainConfig,
    TrainResult,
    load_classifier_checkpoint,
    load_codec_checkpoint,
    load_diffusion_checkpoint,
)
from .video import VideoSamplerConfig

log = logging.getLogger(__name__)


@dataclass
class StageRecord:
    stage: str
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    wall_time: float = 0.0
    status: str = "ok"


class Pipeline:
    def __init__(self, config: RunConfig):
        self.config = config
        self.run_dir = Path(config.run_dir)
        self.hash = config_hash(config)

    # ---- paths ----------------------------------------------------------
    @property
    def data_dir(self) -> Path:
        return self.run_dir / "data"

    @property
    def manifest_path(self) -> Path:
        return self.data_dir / "manifest.jsonl"

    def ckpt(self, name: str) -> Path:
        return self.run_dir / "checkpoints" / f"{name}.pt"

    # ---- bookkeeping ----------------------------------------------------
    @contextmanager
    def _stage(self, name: str):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        lock = self.run_dir / ".lock"
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"run directory {self.run_dir} is locked by another stage "
                f"(remove {lock} if stale)"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        record = StageRecord(stage=name, seed=self.config.seed)
        start = time.monotonic()
        try:
            yield record
        except BaseException:
            record.status = "failed"
            raise
        finally:
            record.wall_time = time.monotonic() - start
            rec_dir = self.run_dir / "records"
            rec_dir.mkdir(parents=True, exist_ok=True)
            (rec_dir / f"{name}.json").write_text(
                json.dumps(asdict(record), indent=2, sort_keys=True) + "\n", "utf-8"
            )
            lock.unlink(missing_ok=True)

    def _require(self, path: Path, what: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"{what} missing: {path} (run the upstream stage first)")
        return path

    def _ckpt_hash(self, path: Path) -> str:
        states, _, _ = load_checkpoint(path)
        return state_content_hash(states)

    def _write_losses(self, name: str, result: TrainResult) -> Path:
        out = self.run_dir / "losses" / f"{name}.json"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(result.losses) + "\n", "utf-8")
        return out

    # ---- stages ---------------------------------------------------------
    def run_synth(self) -> DatasetManifest:
        cfg = self.config
        with self._stage("synth") as rec:
            synth_cfg = SynthConfig(
                n_images=cfg.data.n_images,
                image_size=cfg.data.image_size,
                variant_mix=cfg.data.variant_mix,
                seed=cfg.seed,
                toolless_fraction=cfg.data.toolless_fraction,
                two_tool_fraction=cfg.data.two_tool_fraction,
                n_clips=cfg.data.n_clips,
                clip_frames=cfg.data.clip_frames,
            )
            manifest = generate_dataset(synth_cfg, self.data_dir)
            rec.outputs = [str(self.manifest_path)]
        return manifest

    def run_train_codec(self) -> TrainResult:
        cfg = self.config
        if cfg.codec.mode != "learned":
            raise RuntimeError("codec.mode is 'identity'; nothing to train")
        manifest = load_manifest(self._require(self.manifest_path, "dataset manifest"))
        with self._stage("codec") as rec:
            result = training.train_codec(
                manifest.subset("train"),
                CodecTrainConfig(
                    codec=CodecConfig(
                        mode="learned",
                        downsample_factor=cfg.codec.downsample_factor,
                        latent_channels=cfg.codec.latent_channels,
                        kl_weight=cfg.codec.kl_weight,
                        hidden_channels=cfg.codec.hidden_channels,
                    ),
                    steps=cfg.codec.steps,
                    batch_size=cfg.codec.batch_size,
                    lr=cfg.codec.lr,
                ),
                seed=cfg.seed,
                out_path=self.ckpt("codec"),
            )
            rec.outputs = [str(result.checkpoint_path), str(self._write_losses("codec", result))]
        return result

    def _codec(self, seed: int):
        if self.config.codec.mode == "learned":
            return load_codec_checkpoint(self._require(self.ckpt("codec"), "codec checkpoint"))
        return init_codec(CodecConfig(mode="identity"), seed)

    def run_stage1(self, resume: str | None = None) -> TrainResult:
        cfg = self.config
        manifest = load_manifest(self._require(self.manifest_path, "dataset manifest"))
        with self._stage("diffusion") as rec:
            codec = self._codec(cfg.seed)
            result = training.train_diffusion(
                manifest.subset("train"),
                cfg.build_schedule(),
                cfg.denoiser_config(in_channels=codec.latent_channels),
                cfg.stage1,
                seed=cfg.seed,
                out_path=self.ckpt("diffusion"),
                codec=codec,
                resume=resume,
            )
            rec.inputs = {"manifest": str(self.manifest_path)}
            rec.outputs = [str(result.checkpoint_path), str(self._write_losses("stage1", result))]
        return result

    def run_stage2(self, resume: str | None = None) -> TrainResult:
        cfg = self.config
        base = self._require(self.ckpt("diffusion"), "stage-1 checkpoint")
        manifest = load_manifest(self._require(self.manifest_path, "dataset manifest"))
        with self._stage("control") as rec:
            base_hash = self._ckpt_hash(base)
            control_manifest = filter_for_control(manifest.subset("train"))
            result = training.train_control(
                base,
                control_manifest,
                cfg.stage2,
                seed=cfg.seed,
                out_path=self.ckpt("control"),
                codec=self._codec(cfg.seed),
                resume=resume,
            )
            rec.inputs = {"manifest": str(self.manifest_path), "base_hash": base_hash}
            rec.outputs = [str(result.checkpoint_path), str(self._write_losses("stage2", result))]
        return result

    def run_train_classifier(self) -> TrainResult:
        cfg = self.config
        manifest = load_manifest(self._require(self.manifest_path, "dataset manifest"))
        with self._stage("classifier") as rec:
            result = training.train_triplet_classifier(
                manifest.subset("train"), cfg.classifier, seed=cfg.seed,
                out_path=self.ckpt("classifier"),
            )
            rec.inputs = {"manifest": str(self.manifest_path)}
            rec.outputs = [str(result.checkpoint_path), str(self._write_losses("classifier", result))]
        return result

    # ---- model loading --------------------------------------------------
    def load_models(self, with_control: bool = False) -> GenerationModels:
        base_path = self._require(self.ckpt("diffusion"), "stage-1 checkpoint")
        denoiser, text_encoder, schedule, vocab, _ = load_diffusion_checkpoint(base_path)
        denoiser.eval()
        text_encoder.eval()
        codec = self._codec(self.config.seed)
        branch = None
        if with_control:
            control_path = self._require(self.ckpt("control"), "stage-2 checkpoint")
            states, _, sidecar = load_checkpoint(control_path)
            base_hash = state_content_hash(
                {"denoiser": denoiser.state_dict(), "text_encoder": text_encoder.state_dict()}
            )
            if sidecar["base_hash"] != base_hash:
                raise MissingArtifactError(
                    f"control checkpoint was trained against base {sidecar['base_hash'][:12]}, "
                    f"loaded base is {base_hash[:12]}"
                )
            branch = ControlBranch(denoiser, seed=0)
            branch.load_state_dict(states["branch"])
            branch.eval()
        return GenerationModels(
            schedule=schedule, denoiser=denoiser, text_encoder=text_encoder,
            vocab=vocab, codec=codec, branch=branch,
        )

    # ---- generation -----------------------------------------------------
    def run_generate(
        self,
        prompt: str,
        out_name: str,
        mask: str | Path | None = None,
        mask_dir: str | Path | None = None,
        n_frames: int = 1,
        seed: int | None = None,
        smoother: bool = True,
    ) -> Path:
        """Sample one image or one clip; writes frames plus reproduction metadata."""
        parse_prompt(prompt)  # surfaces unparseable prompts before any work
        seed = self.config.seed if seed is None else seed
        out = self.run_dir / "samples" / out_name
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)

        mask_paths: list[Path] = []
        if mask_dir is not None:
            mask_paths = sorted(Path(mask_dir).glob("*.png"))
            if len(mask_paths) < n_frames:
                raise MissingArtifactError(
                    f"mask dir {mask_dir} holds {len(mask_paths)} masks, need {n_frames}"
                )
            mask_paths = mask_paths[:n_frames]
        elif mask is not None:
            mask_paths = [Path(mask)] * n_frames

        with self._stage("sample_video" if n_frames > 1 else "sample_image") as rec:
            models = self.load_models(with_control=bool(mask_paths))
            masks = None
            if mask_paths:
                arrays = [
                    (load_mask(p) > 127).astype(np.float32) for p in mask_paths
                ]
                masks = torch.from_numpy(np.stack(arrays))[:, None]
                for i, arr in enumerate(arrays):
                    Image.fromarray((arr * 255).astype(np.uint8)).save(
                        out / f"mask_{i:04d}.png"
                    )
            vconfig = VideoSamplerConfig(
                n_frames=n_frames,
                sampler=self.config.sampler_config(),
                smoother_enabled=smoother and n_frames > 1,
            )
            frames = sample_frames(
                models, prompt, masks, vconfig, seed,
                image_size=self.config.data.image_size,
            )
            arr = to_uint8(frames).permute(0, 2, 3, 1).numpy()
            files = []
            for i in range(arr.shape[0]):
                name = "image.png" if n_frames == 1 else f"frame_{i:04d}.png"
                Image.fromarray(arr[i]).save(out / name)
                files.append(name)
            meta = {
                "prompt": prompt,
                "n_frames": n_frames,
                "seed": seed,
                "config_hash": self.hash,
                "smoother": bool(smoother and n_frames > 1),
                "masks": [f"mask_{i:04d}.png" for i in range(len(mask_paths))],
                "frames": files,
                "checkpoints": {
                    "diffusion": self._ckpt_hash(self.ckpt("diffusion")),
                    **(
                        {"control": self._ckpt_hash(self.ckpt("control"))}
                        if mask_paths else {}
                    ),
                },
            }
            (out / "video_meta.json").write_text(
                json.dumps(meta, indent=2, sort_keys=True) + "\n", "utf-8"
            )
            rec.inputs = dict(meta["checkpoints"])
            rec.outputs = [str(out / f) for f in files]
        return out

    def rerun_from_metadata(self, meta_path: str | Path, out_name: str) -> Path:
        """Regenerate a sample directory from its own metadata sidecar."""
        meta_path = Path(meta_path)
        meta = json.loads(meta_path.read_text("utf-8"))
        if meta["config_hash"] != self.hash:
            raise MissingArtifactError(
                f"metadata was produced under config {meta['config_hash'][:12]}, "
                f"current config is {self.hash[:12]}"
            )
        src = meta_path.parent
        mask_dir = None
        mask = None
        if meta["masks"]:
            mask_dir = src if meta["n_frames"] > 1 else None
            mask = src / meta["masks"][0] if meta["n_frames"] == 1 else None
        return self.run_generate(
            meta["prompt"], out_name, mask=mask, mask_dir=mask_dir,
            n_frames=meta["n_frames"], seed=meta["seed"], smoother=meta["smoother"],
        )

    # ---- evaluation -----------------------------------------------------
    def generate_eval_set(
        self,
        tag: str,
        with_control: bool,
        n_samples: int | None = None,
        models: GenerationModels | None = None,
        split: str = "test",
        require_triplets: bool = False,
    ) -> Path:
        """Sample one generated image per drawn real row (prompt-paired)."""
        cfg = self.config
        manifest = load_manifest(self._require(self.manifest_path, "dataset manifest"))
        rows = manifest.subset(split).rows
        if require_triplets:
            rows = [r for r in rows if r.triplets]
        if not rows:
            raise MissingArtifactError(f"no usable rows in split {split!r}")
        n = n_samples if n_samples is not None else cfg.eval.n_samples
        rng = np.random.default_rng(cfg.seed + 101)
        picked = [rows[i] for i in rng.integers(0, len(rows), size=n)]

        models = models or self.load_models(with_control=with_control)
        out = self.run_dir / "generated" / tag
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        pairs = []
        sampler = cfg.sampler_config()
        bs = cfg.eval.batch_size
        for start in range(0, len(picked), bs):
            chunk = picked[start: start + bs]
            masks = None
            if with_control:
                stacked = np.stack([
                    (load_mask(manifest.mask_file(r)) > 127).astype(np.float32)
                    for r in chunk
                ])
                masks = torch.from_numpy(stacked)[:, None]
            imgs = sample_image_batch(
                models, [r.prompt for r in chunk], masks, sampler,
                seed=cfg.seed + 7000 + start, image_size=cfg.data.image_size,
            )
            arr = to_uint8(imgs).permute(0, 2, 3, 1).numpy()
            for j, row in enumerate(chunk):
                name = f"gen_{start + j:05d}.png"
                Image.fromarray(arr[j]).save(out / name)
                pairs.append({"row_id": row.id, "prompt": row.prompt, "image": name})
        write_generation_meta(out, pairs, seed=cfg.seed, config_hash=self.hash,
                              with_masks=with_control)
        return out

    def run_evaluate(
        self,
        with_control: bool = False,
        n_samples: int | None = None,
        tag: str | None = None,
        with_classifier: bool = True,
    ) -> MetricReport:
        cfg = self.config
        tag = tag or ("control" if with_control else "diffusion")
        with self._stage("evaluate") as rec:
            gen_dir = self.generate_eval_set(tag, with_control, n_samples)
            manifest = load_manifest(self.manifest_path)
            classifier = None
            if with_classifier and self.ckpt("classifier").exists():
                classifier = load_classifier_checkpoint(self.ckpt("classifier"))
            settings = EvalSettings(
                extractor_id=cfg.eval.extractor_id,
                clip_extractor_id=cfg.eval.clip_extractor_id,
                cmmd_sigma=cfg.eval.cmmd_sigma,
                cmmd_scale=cfg.eval.cmmd_scale,
                config_hash=self.hash,
                seed=cfg.seed,
            )
            report = evaluate_generation(manifest, gen_dir, settings, classifier)
            reports = self.run_dir / "reports"
            reports.mkdir(parents=True, exist_ok=True)
            (reports / f"{tag}.json").write_text(report.to_json(), "utf-8")
            table = report_table(report)
            (reports / f"{tag}.txt").write_text(table + "\n", "utf-8")
            log.info("evaluation (%s):\n%s", tag, table)
            rec.inputs = {"manifest": str(self.manifest_path)}
            rec.outputs = [str(reports / f"{tag}.json")]
        return report
