"""Command-line interface.

Subcommands mirror the pipeline stages; global flags select the config file,
preset, seed, and dotted-key overrides.  Exit codes: 0 success, 2 config
error, 3 missing artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .checkpoint import MissingArtifactError
from .config import ConfigError, config_to_dict, load_config
from .evaluation import report_table
from .manifest import load_manifest
from .metrics import NumericalError
from .pipeline import Pipeline
from .synth import ingest_external

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lapgen",
        description="Controllable surgical-scene image/video generation sandbox.",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--preset", choices=["desk", "paper"], help="config preset")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="dotted-key config override, e.g. --set stage1.lr=0.001",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate the synthetic dataset")

    p = sub.add_parser("ingest", help="build a manifest from external labeled frames")
    p.add_argument("--images", required=True, help="image directory")
    p.add_argument("--labels", required=True, help="CSV label file")
    p.add_argument("--masks", help="optional mask directory")
    p.add_argument("--out", required=True, help="output dataset directory")

    sub.add_parser("train-codec", help="train the learned latent codec")
    p = sub.add_parser("train-diffusion", help="stage 1: text-conditioned denoiser")
    p.add_argument("--resume", help="resume from a checkpoint")
    p = sub.add_parser("train-control", help="stage 2: mask control branch")
    p.add_argument("--resume", help="resume from a checkpoint")
    sub.add_parser("train-classifier", help="train the eval triplet classifier")

    p = sub.add_parser("sample-image", help="generate one image")
    p.add_argument("--prompt", required=True)
    p.add_argument("--mask", help="conditioning mask PNG (enables control)")
    p.add_argument("--out-name", default="image")
    p.add_argument("--from-meta", help="reproduce from a video_meta.json")

    p = sub.add_parser("sample-video", help="generate a clip from per-frame masks")
    p.add_argument("--prompt", required=True)
    p.add_argument("--mask-dir", help="directory of per-frame mask PNGs")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--no-smoother", action="store_true")
    p.add_argument("--out-name", default="video")

    p = sub.add_parser("evaluate", help="run the metric battery")
    p.add_argument("--control", action="store_true", help="evaluate the control model")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--tag")

    p = sub.add_parser("report", help="print a saved metric report")
    p.add_argument("report_json")
    return parser


def _run(args) -> int:
    cfg = load_config(args.config, preset=args.preset, overrides=args.overrides, seed=args.seed)
    pipe = Pipeline(cfg)
    if args.command == "synth":
        manifest = pipe.run_synth()
        print(f"wrote {len(manifest)} rows under {pipe.data_dir}")
    elif args.command == "ingest":
        manifest, summary = ingest_external(
            args.images, args.labels, args.out, mask_dir=args.masks,
            image_size=cfg.data.image_size,
        )
        print(f"ingested {summary.n_rows} rows, skipped {summary.n_skipped}")
        for err in summary.errors:
            print(f"  {err}", file=sys.stderr)
    elif args.command == "train-codec":
        result = pipe.run_train_codec()
        print(f"codec checkpoint {result.checkpoint_path} (loss {result.final_loss:.4f})")
    elif args.command == "train-diffusion":
        result = pipe.run_stage1(resume=args.resume)
        print(f"diffusion checkpoint {result.checkpoint_path} (loss {result.final_loss:.4f})")
    elif args.command == "train-control":
        result = pipe.run_stage2(resume=args.resume)
        print(f"control checkpoint {result.checkpoint_path} (loss {result.final_loss:.4f})")
    elif args.command == "train-classifier":
        result = pipe.run_train_classifier()
        print(f"classifier checkpoint {result.checkpoint_path} (loss {result.final_loss:.4f})")
    elif args.command == "sample-image":
        if args.from_meta:
            out = pipe.rerun_from_metadata(args.from_meta, args.out_name)
        else:
            out = pipe.run_generate(args.prompt, args.out_name, mask=args.mask, n_frames=1)
        print(f"wrote {out}")
    elif args.command == "sample-video":
        out = pipe.run_generate(
            args.prompt, args.out_name, mask_dir=args.mask_dir,
            n_frames=args.frames, smoother=not args.no_smoother,
        )
        print(f"wrote {out}")
    elif args.command == "evaluate":
        report = pipe.run_evaluate(
            with_control=args.control, n_samples=args.n_samples, tag=args.tag,
        )
        print(report_table(report))
    elif args.command == "report":
        from .evaluation import MetricReport

        with open(args.report_json, encoding="utf-8") as fh:
            print(report_table(MetricReport.from_json(fh.read())))
    else:  # pragma: no cover - argparse enforces choices
        raise ConfigError(f"unknown command {args.command!r}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
