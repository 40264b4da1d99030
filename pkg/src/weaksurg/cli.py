"""Command-line entry point: ``weaksurg {synth,train,eval,export-plots}``.

Exit codes: 0 success, 2 bad flags or configuration, 3 missing or unreadable
paths, 4 corrupt checkpoint. Human-readable text goes to stdout; machine
output only to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .errors import CheckpointError, ConfigurationError, DatasetIOError
from .synthvid import generate_dataset, read_dataset, read_meta, write_dataset

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CHECKPOINT = 4

NUM_WORKERS_ENV = "WEAKSURG_NUM_WORKERS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="weaksurg", description="Weakly supervised instrument segmentation pipeline.")
    p.add_argument("--seed", type=int, default=None,
                   help="global seed; overrides the config seed for train (default 0)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic video dataset")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--clips", type=_positive_int, default=8)
    s.add_argument("--frames", type=_positive_int, default=16)
    s.add_argument("--classes", type=_positive_int, default=7)
    s.add_argument("--image-size", type=_positive_int, default=64)

    t = sub.add_parser("train", help="train the encoder from image-level labels")
    t.add_argument("--config", type=Path, default=None, help="TOML or JSON TrainConfig file")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)

    e = sub.add_parser("eval", help="evaluate CAM seeds or pseudo masks")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", type=Path)
    src.add_argument("--oracle", action="store_true", help="use CAMs built from the GT masks")
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--stage", required=True, choices=("cam_seed", "pseudo_mask"))
    e.add_argument("--report", type=Path, default=None,
                   help="JSON report path (default: eval_<stage>.json next to the checkpoint or in cwd)")
    e.add_argument("--masks-out", type=Path, default=None, help="also write pseudo-mask PNGs here")

    x = sub.add_parser("export-plots", help="write one PNG panel per frame")
    xs = x.add_mutually_exclusive_group(required=True)
    xs.add_argument("--ckpt", type=Path)
    xs.add_argument("--oracle", action="store_true")
    x.add_argument("--data", required=True, type=Path)
    x.add_argument("--out", required=True, type=Path)
    x.add_argument("--max-frames", type=_positive_int, default=None, help="per clip")
    return p


def _num_workers() -> int:
    raw = os.environ.get(NUM_WORKERS_ENV)
    if raw is None or raw == "":
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"{NUM_WORKERS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigurationError(f"{NUM_WORKERS_ENV} must be >= 1, got {value}")
    return value


def _load_data(path: Path):
    clips = read_dataset(path, num_workers=_num_workers())
    if not clips:
        raise ConfigurationError(f"dataset {path} holds no clips")
    return clips, read_meta(path)


def _cam_source(args):
    from .trainer import ModelCams, TrainConfig, load_model, oracle_cams

    if args.oracle:
        return oracle_cams, TrainConfig()
    model, config = load_model(args.ckpt)
    return ModelCams(model), config


def cmd_synth(args) -> int:
    seed = 0 if args.seed is None else args.seed
    clips = generate_dataset(args.clips, args.frames, image_size=args.image_size,
                             num_classes=args.classes, seed=seed)
    meta = write_dataset(clips, args.out)
    objects = sum(len(c.instance_classes) for c in clips)
    print(f"wrote {len(clips)} clips x {args.frames} frames ({args.image_size}px, "
          f"{args.classes} classes, {objects} instruments, seed {seed}) to {args.out}")
    print(f"manifest: {args.out / 'meta.json'} ({len(meta['clips'])} clip entries)")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = TrainConfig.from_dict({**config.__dict__, "seed": args.seed})
    clips, _ = _load_data(args.data)

    def progress(epoch, cls_map):
        print(f"epoch {epoch + 1}/{config.epochs}  cls mAP {cls_map:.4f}", flush=True)

    _, record = train(config, clips, args.out, progress=progress)
    print(f"checkpoint: {args.out / 'checkpoint.pt'}")
    print(f"run record: {args.out / 'run_record.jsonl'} ({len(record.steps)} steps)")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pseudomask import cam_to_seed, seed_to_instances, write_pseudo_masks
    from .trainer import evaluate_stage

    clips, meta = _load_data(args.data)
    cams, config = _cam_source(args)
    report = evaluate_stage(cams, clips, args.stage, config, class_names=meta.get("class_names"))
    report["source"] = "oracle" if args.oracle else str(args.ckpt)
    if args.report is not None:
        path = args.report
    elif args.ckpt is not None:
        path = args.ckpt.parent / f"eval_{args.stage}.json"
    else:
        path = Path(f"eval_{args.stage}.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=1, sort_keys=True))

    sem = report["semantic"]
    print(f"stage {args.stage} on {report['num_frames']} frames")
    print(f"  Ch_IoU {sem['Ch_IoU']:.2f}  ISI_IoU {sem['ISI_IoU']:.2f}  mcIoU {sem['mcIoU']:.2f}")
    if "instance" in report:
        ins = report["instance"]
        print(f"  AP50 {ins['AP50']:.2f}  AP75 {ins['AP75']:.2f}  mAP {ins['mAP']:.2f}")
    print(f"report: {path}")

    if args.masks_out is not None:
        for clip in clips:
            maps = cams(clip)
            frames = [seed_to_instances(cam_to_seed(maps[f], clip.presence[f], config.theta_bg),
                                        maps[f], config.min_area_frac) for f in range(len(clip))]
            write_pseudo_masks(frames, args.masks_out / clip.clip_id, maps.shape[-2:])
        print(f"pseudo masks: {args.masks_out}")
    return EXIT_OK


def cmd_export_plots(args) -> int:
    from .plots import export_plots

    clips, meta = _load_data(args.data)
    if args.max_frames is not None:
        clips = [c.head(args.max_frames) for c in clips]
    cams, config = _cam_source(args)
    written = export_plots(cams, clips, args.out, meta.get("class_names"),
                           config.theta_bg, config.min_area_frac)
    print(f"wrote {len(written)} panels to {args.out}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "export-plots": cmd_export_plots}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None:
        torch.manual_seed(args.seed)
    try:
        return COMMANDS[args.command](args)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DatasetIOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
