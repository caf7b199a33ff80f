"""Command-line entry points.

Exit codes: 0 success, 2 config error, 3 data/checkpoint error, 4 numerical
divergence. Every command writes a machine-readable summary (and, for runs, a
fully-resolved config snapshot) into its run/output directory and prints the
summary as one JSON line on stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .config import Config, apply_overrides, load_config, save_resolved, \
    validate_config
from .data import build_weak_dataset, compute_norm_stats, load_image, \
    scan_directory
from .errors import CheckpointError, ConfigError, DataError, NumericalError
from .evaluation import evaluate_manifest, export_cam_bundle, patch_grid_infer
from .training import Trainer, checkpoint_info, load_for_eval

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--override", action="append", default=[],
                   metavar="SECTION.KEY=VALUE",
                   help="config override, repeatable")
    p.add_argument("--run-dir", help="output directory "
                   "(default: $WEAKCRACK_RUN_DIR or ./runs/<cmd>-<time>)")
    p.add_argument("--device", help="torch device, overrides train.device")
    p.add_argument("--seed", type=int, help="overrides train.seed")


def _resolve_cfg(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    cfg = apply_overrides(cfg, args.override)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.device:
        cfg.train.device = args.device
    return validate_config(cfg)


def _resolve_run_dir(args, command: str) -> Path:
    if getattr(args, "run_dir", None):
        d = Path(args.run_dir)
    elif os.environ.get("WEAKCRACK_RUN_DIR"):
        d = Path(os.environ["WEAKCRACK_RUN_DIR"])
    else:
        d = Path("runs") / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _emit(run_dir: Path, summary: dict):
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))


# ------------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = _resolve_cfg(args)
    run_dir = _resolve_run_dir(args, "train")
    manifest = scan_directory(cfg.data.root, "train")
    if cfg.data.auto_stats:
        mean, std = compute_norm_stats(manifest)
        cfg.data.normalize_mean, cfg.data.normalize_std = mean, std
    trainer = Trainer(cfg, manifest, run_dir=run_dir, device=cfg.train.device)
    last = trainer.run()
    trainer.close()
    _emit(run_dir, {"command": "train", "steps": trainer.step,
                    "train_images": len(manifest), "last": last,
                    "checkpoint": str(trainer.checkpoint_path())})
    return 0


def _locate_checkpoint(args, run_dir: Path) -> Path:
    """Explicit --checkpoint, else highest-step file under run_dir/checkpoints."""
    if getattr(args, "checkpoint", None):
        return Path(args.checkpoint)
    best = None
    ckpt_dir = run_dir / "checkpoints"
    if ckpt_dir.is_dir():
        for p in ckpt_dir.glob("step_*.pkl"):
            try:
                n = int(p.stem.split("_", 1)[1])
            except ValueError:
                continue
            if best is None or n > best[0]:
                best = (n, p)
    if best is None:
        raise CheckpointError(f"no checkpoint found under {ckpt_dir}; "
                              "pass --checkpoint")
    return best[1]


def _append_metrics_csv(path: Path, step: int, metrics: dict):
    pixel = metrics.get("pixel") or {}
    row = {"step": step, "split": metrics["split"],
           "n_images": metrics["n_images"],
           "n_with_masks": metrics["n_with_masks"],
           "classification_accuracy": metrics["classification_accuracy"]}
    for key in ("precision", "recall", "f1", "iou", "accuracy"):
        row[key] = pixel.get(key, "")
    header = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        if header:
            writer.writeheader()
        writer.writerow(row)


def cmd_eval(args) -> int:
    run_dir = _resolve_run_dir(args, "eval")
    ckpt = _locate_checkpoint(args, run_dir)
    cfg, models = load_for_eval(ckpt, device=args.device or "cpu")
    cfg = validate_config(apply_overrides(cfg, args.override))
    split = args.split or cfg.eval.split
    manifest = scan_directory(cfg.data.root, split)
    metrics = evaluate_manifest(models, manifest, cfg,
                                device=args.device or "cpu")
    save_resolved(cfg, run_dir / "config.resolved.toml")
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=1))
    _append_metrics_csv(run_dir / "metrics.csv", checkpoint_info(ckpt)["step"],
                        metrics)
    _emit(run_dir, {"command": "eval", "checkpoint": str(ckpt), **metrics})
    return 0


def _iter_inputs(spec: str):
    path = Path(spec)
    if path.is_file():
        yield path
        return
    if not path.is_dir():
        raise DataError(f"input not found: {path}")
    for p in sorted(path.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            yield p


def cmd_infer(args) -> int:
    cfg, models = load_for_eval(args.checkpoint, device=args.device or "cpu")
    cfg = validate_config(apply_overrides(cfg, args.override))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = args.patch_grid or cfg.eval.patch_grid
    names = []
    for p in _iter_inputs(args.input):
        mask = patch_grid_infer(models, load_image(p), cfg, grid=grid,
                                device=args.device or "cpu")
        out = out_dir / f"{p.stem}_mask.png"
        Image.fromarray(mask * 255).save(out)
        names.append(out.name)
    if not names:
        print(f"warning: no images under {args.input}", file=sys.stderr)
    _emit(out_dir, {"command": "infer", "n_images": len(names),
                    "outputs": names})
    return 0


def cmd_export_cams(args) -> int:
    cfg, models = load_for_eval(args.checkpoint, device=args.device or "cpu")
    cfg = validate_config(apply_overrides(cfg, args.override))
    run_dir = _resolve_run_dir(args, "cams")
    out_dir = run_dir / "exports"
    out_dir.mkdir(exist_ok=True)
    manifest = scan_directory(cfg.data.root, args.split or cfg.eval.split)
    rows = []
    with open(out_dir / "index.jsonl", "w") as fh:
        for s in manifest.samples:
            if s.label != 1:
                continue
            image = load_image(Path(manifest.root) / s.path)
            bundle = export_cam_bundle(models, image, cfg,
                                       device=args.device or "cpu")
            stem = Path(s.path).stem
            for key in ("cam", "marginal", "pseudo"):
                arr = (np.clip(bundle[key], 0, 1) * 255).astype(np.uint8)
                Image.fromarray(arr).save(out_dir / f"{stem}_{key}.png")
            row = {"name": s.path, "pseudo_valid": bool(bundle["valid"])}
            fh.write(json.dumps(row) + "\n")
            rows.append(row)
    _emit(run_dir, {"command": "export-cams", "n_images": len(rows),
                    "out_dir": str(out_dir)})
    return 0


def cmd_build(args) -> int:
    out_dir = Path(args.out)
    counts = build_weak_dataset(args.source, out_dir, grid=args.grid,
                                min_crack_pixels=args.min_crack_pixels,
                                splits=tuple(args.splits.split(",")))
    out_dir.mkdir(parents=True, exist_ok=True)
    _emit(out_dir, {"command": "build-weak-dataset", "grid": args.grid,
                    "counts": counts})
    return 0


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="weakcrack",
        description="weakly-supervised pixel-wise crack detection")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on image-level labels")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="write predicted masks for images")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--patch-grid", type=int)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("export-cams",
                       help="dump CAM / CRF marginal / pseudo mask PNGs")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split")
    p.set_defaults(fn=cmd_export_cams)

    p = sub.add_parser("build-weak-dataset",
                       help="patchify a pixel-labeled source into weak labels")
    p.add_argument("--source", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=1)
    p.add_argument("--min-crack-pixels", type=int, default=1)
    p.add_argument("--splits", default="train,test")
    p.set_defaults(fn=cmd_build)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
