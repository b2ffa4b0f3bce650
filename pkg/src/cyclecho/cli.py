"""Command-line entry points for the full training and evaluation pipeline.

Typical desk-scale flow:

    cyclecho synth --out data/synth --count 150 --test-count 30 --seed 7
    cyclecho train-seg   --data-root data/synth --out runs/a --seed 0
    cyclecho infer-masks --data-root data/synth --out runs/a
    cyclecho train-multi --data-root data/synth --out runs/a
    cyclecho distill     --data-root data/synth --out runs/a
    cyclecho evaluate    --data-root data/synth --out runs/a --checkpoint runs/a/fe.pt
    cyclecho heatmap     --data-root data/synth --out runs/a --checkpoint runs/a/fe.pt

The dataset root may also come from the CYCLECHO_DATA_ROOT environment
variable; explicit flags win over config-file values, which win over the
preset. Each command snapshots its resolved config into the output directory
before doing any work.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from cyclecho.config import RunConfig, load_config, parse_config_file, preset
from cyclecho.data import (
    generate_synthetic,
    load_manifest,
    sample_regression_clip,
    split_labels,
    write_corpus,
)
from cyclecho.evaluation import (
    MetricReport,
    save_saliency_overlay,
    smoothgrad,
    top_gradient_dice,
    write_metric_report,
    write_predictions,
)
from cyclecho.models import load_checkpoint, save_checkpoint
from cyclecho.pipeline import (
    evaluate_regression,
    evaluate_segmentation,
    mask_source_from_args,
    precompute_masks,
    train_segmentation_stage,
    train_student_stage,
    train_teacher_stage,
)
from cyclecho.regression import build_video_clip

ENV_DATA_ROOT = "CYCLECHO_DATA_ROOT"
SNAPSHOT_NAME = "config_resolved.cfg"


class CliError(RuntimeError):
    """User-facing command failure; rendered as a message and exit code 2."""


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="flat key=value config file")
    parser.add_argument("--preset", choices=["desk", "paper"], help="base preset (default desk)")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--label-fraction", type=float, help="fraction of training labels kept")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--data-root", type=Path, help=f"dataset root (or ${ENV_DATA_ROOT})")
    parser.add_argument("--deterministic", action="store_true", help="force deterministic kernels")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Preset -> config file -> CLI flags, in increasing precedence."""
    if args.config is not None:
        if not args.config.exists():
            raise CliError(f"config file {args.config} does not exist")
        if args.preset is not None:
            cfg = preset(args.preset)
            cfg.apply_tables(parse_config_file(args.config))
        else:
            cfg = load_config(args.config)
    else:
        cfg = preset(args.preset or "desk")
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.label_fraction is not None:
        cfg.run.label_fraction = args.label_fraction
    if args.out is not None:
        cfg.run.out_dir = str(args.out)
    if args.deterministic:
        cfg.run.deterministic = True
    data_root = args.data_root or (
        Path(os.environ[ENV_DATA_ROOT]) if os.environ.get(ENV_DATA_ROOT) else None
    )
    if data_root is not None:
        cfg.run.data_root = str(data_root)
    if getattr(args, "w_css", None) is not None:
        cfg.cycle.weight = args.w_css
    if getattr(args, "w_ulb", None) is not None:
        cfg.regression.unlabeled_weight = args.w_ulb
    if getattr(args, "epochs", None) is not None:
        cfg.segmentation.epochs = args.epochs
        cfg.regression.epochs = args.epochs
    return cfg


def _apply_determinism(cfg: RunConfig) -> None:
    torch.manual_seed(cfg.run.seed)
    if cfg.run.deterministic:
        torch.use_deterministic_algorithms(True)


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / SNAPSHOT_NAME)  # snapshot before any work
    return out


def _dataset(cfg: RunConfig):
    if not cfg.run.data_root:
        raise CliError(f"no dataset root; pass --data-root or set ${ENV_DATA_ROOT}")
    root = Path(cfg.run.data_root)
    if not (root / "manifest.csv").exists():
        raise CliError(f"{root} has no manifest.csv; run `cyclecho synth --out {root}` first")
    return load_manifest(root)


def _require(path: Path, hint: str) -> Path:
    if not Path(path).exists():
        raise CliError(f"{path} does not exist; {hint}")
    return Path(path)


def _split(cfg: RunConfig, dataset):
    return split_labels(dataset, cfg.run.label_fraction, seed=cfg.run.seed)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    if args.count is not None:
        cfg.synth.count = args.count
    if args.test_count is not None:
        cfg.synth.test_count = args.test_count
    if args.cycles is not None:
        cfg.synth.cycles_lo = cfg.synth.cycles_hi = args.cycles
    if args.noise is not None:
        cfg.synth.noise = args.noise
    out = Path(cfg.run.out_dir)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise CliError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    params = cfg.synth_params()  # validates, e.g. rejects --cycles 1
    _apply_determinism(cfg)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / SNAPSHOT_NAME)
    train = generate_synthetic(cfg.synth.count, params, seed=cfg.run.seed, id_prefix="train")
    labeled = [(s, "train") for s in train]
    if cfg.synth.test_count:
        test = generate_synthetic(
            cfg.synth.test_count, params, seed=cfg.run.seed + 1, id_prefix="test"
        )
        labeled += [(s, "test") for s in test]
    write_corpus(labeled, out)
    total = cfg.synth.count + cfg.synth.test_count
    print(f"wrote {total} sequences under {out}")
    return 0


def cmd_train_seg(args) -> int:
    cfg = resolve_config(args)
    dataset = _dataset(cfg)
    _apply_determinism(cfg)
    out = _prepare_out(cfg)
    split = _split(cfg, dataset)
    model = train_segmentation_stage(
        cfg, dataset, split, seed=cfg.run.seed, joint=True, log_path=out / "seg_loss_log.csv"
    )
    save_checkpoint(
        out / "seg.pt",
        model,
        {"kind": "segmentation", "arch": cfg.segmentation.arch, "config": cfg.to_tables()},
    )
    print(f"segmentation checkpoint: {out / 'seg.pt'}")
    return 0


def cmd_infer_masks(args) -> int:
    cfg = resolve_config(args)
    dataset = _dataset(cfg)
    _apply_determinism(cfg)
    out = _prepare_out(cfg)
    ckpt = _require(args.checkpoint or out / "seg.pt", "run `cyclecho train-seg` first")
    model, _ = load_checkpoint(ckpt)
    ids = dataset.ids() if args.split == "all" else dataset.ids(args.split)
    mask_dir = precompute_masks(model, dataset, ids, out / "masks_pred")
    print(f"probability maps for {len(ids)} sequences under {mask_dir}")
    return 0


def cmd_train_multi(args) -> int:
    cfg = resolve_config(args)
    dataset = _dataset(cfg)
    _apply_determinism(cfg)
    out = _prepare_out(cfg)
    masks = _mask_source(args, cfg, dataset, out)
    split = _split(cfg, dataset)
    model = train_teacher_stage(
        cfg, dataset, split, masks, seed=cfg.run.seed, log_path=out / "fm_loss_log.csv"
    )
    save_checkpoint(
        out / "fm.pt",
        model,
        {"kind": "regressor", "arch": cfg.regression.arch, "in_channels": 4, "config": cfg.to_tables()},
    )
    print(f"multi-input regressor checkpoint: {out / 'fm.pt'}")
    return 0


def _mask_source(args, cfg, dataset, out: Path):
    masks_dir = args.masks
    if masks_dir is None and (out / "masks_pred").exists():
        masks_dir = out / "masks_pred"
    seg_model = None
    if masks_dir is None:
        ckpt = args.seg_checkpoint or out / "seg.pt"
        ckpt = _require(
            Path(ckpt),
            "run `cyclecho infer-masks` first or pass --masks/--seg-checkpoint",
        )
        seg_model, _ = load_checkpoint(ckpt)
    return mask_source_from_args(masks_dir, seg_model, dataset)


def cmd_distill(args) -> int:
    cfg = resolve_config(args)
    dataset = _dataset(cfg)
    _apply_determinism(cfg)
    out = _prepare_out(cfg)
    teacher_path = _require(args.teacher or out / "fm.pt", "run `cyclecho train-multi` first")
    teacher, meta = load_checkpoint(teacher_path)
    if getattr(teacher, "in_channels", None) != 4:
        raise CliError(f"{teacher_path} is not a multi-input (4-channel) regressor checkpoint")
    masks = _mask_source(args, cfg, dataset, out)
    split = _split(cfg, dataset)
    model = train_student_stage(
        cfg, dataset, split, teacher, masks, seed=cfg.run.seed, log_path=out / "fe_loss_log.csv"
    )
    save_checkpoint(
        out / "fe.pt",
        model,
        {"kind": "regressor", "arch": cfg.regression.arch, "in_channels": 3, "config": cfg.to_tables()},
    )
    print(f"distilled video-only checkpoint: {out / 'fe.pt'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    dataset = _dataset(cfg)
    _apply_determinism(cfg)
    out = _prepare_out(cfg)
    ckpt = _require(args.checkpoint or out / "fe.pt", "train a model first (train-multi or distill)")
    model, meta = load_checkpoint(ckpt)
    ids = dataset.ids(args.split)
    if not ids:
        raise CliError(f"dataset has no '{args.split}' split sequences")

    if meta.get("kind") == "segmentation":
        seg_scores = evaluate_segmentation(model, dataset, ids, seed=cfg.run.seed)
        report = MetricReport(
            mae=float("nan"), r2=float("nan"), n=len(ids), seed=cfg.run.seed, **seg_scores
        )
        write_metric_report(report, out / "report.csv", out / "report.txt")
        print((out / "report.txt").read_text())
        return 0

    masks = None
    if model.in_channels == 4:
        masks = _mask_source(args, cfg, dataset, out)
    scores = evaluate_regression(model, dataset, ids, cfg, masks=masks)
    rows = [
        (p.sequence_id, p.value, label, p.source)
        for p, label in zip(scores["predictions"], scores["labels"])
    ]
    write_predictions(rows, out / "predictions.csv")
    seg_scores = {"dice_ed": float("nan"), "dice_es": float("nan"), "dice_unlabeled": float("nan")}
    if args.seg_checkpoint is not None:
        seg_model, _ = load_checkpoint(_require(args.seg_checkpoint, "bad --seg-checkpoint"))
        seg_scores = evaluate_segmentation(seg_model, dataset, ids, seed=cfg.run.seed)
    report = MetricReport(
        mae=scores["mae"], r2=scores["r2"], n=len(ids), seed=cfg.run.seed, **seg_scores
    )
    write_metric_report(report, out / "report.csv", out / "report.txt")
    print((out / "report.txt").read_text())
    return 0


def cmd_heatmap(args) -> int:
    cfg = resolve_config(args)
    dataset = _dataset(cfg)
    _apply_determinism(cfg)
    out = _prepare_out(cfg)
    ckpt = _require(args.checkpoint or out / "fe.pt", "train a regressor first")
    model, _ = load_checkpoint(ckpt)
    if getattr(model, "in_channels", None) != 3:
        raise CliError("heatmaps need the video-only (3-channel) regressor")
    ids = dataset.ids("test")[: cfg.evaluation.heatmap_videos]
    if not ids:
        raise CliError("dataset has no test sequences")
    heat_dir = out / "heatmaps"
    heat_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    reg = cfg.reg_train_config()
    for sid in ids:
        frames = dataset.frames(sid)
        clip = sample_regression_clip(frames, reg.clip_len, reg.clip_stride, start=0)
        clip.sequence_id = sid
        x = build_video_clip(clip, dataset.stats)
        sal = smoothgrad(
            model,
            x,
            n_samples=cfg.evaluation.smoothgrad_samples,
            sigma=cfg.evaluation.smoothgrad_sigma,
            seed=cfg.run.seed,
        )
        mid = len(clip.original_indices) // 2
        frame_idx = int(clip.original_indices[mid])
        if dataset.has_frame_masks(sid):
            label = dataset.frame_mask(sid, frame_idx)
        else:
            label = dataset.sequence(sid).ed_mask
        score = top_gradient_dice(sal[mid], label, k=cfg.evaluation.saliency_top_k)
        rows.append({"id": sid, "frame": frame_idx, "top_gradient_dice": score})
        save_saliency_overlay(frames[frame_idx], sal[mid], heat_dir / f"{sid}_{frame_idx:06d}.png")
    import csv as _csv

    with (out / "saliency_dice.csv").open("w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=["id", "frame", "top_gradient_dice"])
        writer.writeheader()
        writer.writerows(rows)
    mean_score = float(np.mean([r["top_gradient_dice"] for r in rows]))
    print(f"saliency overlays for {len(ids)} videos; mean top-gradient dice {mean_score:.3f}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cyclecho",
        description="Semi-supervised ejection-fraction pipeline on cyclical video",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cyclical-video dataset")
    _add_common(p)
    p.add_argument("--count", type=int, help="number of training sequences")
    p.add_argument("--test-count", type=int, help="number of test sequences")
    p.add_argument("--cycles", type=float, help="fixed cycles per video (>= 2)")
    p.add_argument("--noise", type=float, help="pixel noise level")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-seg", help="train segmentation jointly with the cyclical loss")
    _add_common(p)
    p.add_argument("--w-css", type=float, help="cyclical loss weight (0 = supervised only)")
    p.add_argument("--epochs", type=int, help="override training epochs")
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("infer-masks", help="write per-frame probability maps for all videos")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, help="segmentation checkpoint (default OUT/seg.pt)")
    p.add_argument("--split", choices=["train", "test", "all"], default="all")
    p.set_defaults(func=cmd_infer_masks)

    p = sub.add_parser("train-multi", help="train the mask-augmented regression teacher")
    _add_common(p)
    p.add_argument("--masks", type=Path, help="precomputed probability-map directory")
    p.add_argument("--seg-checkpoint", type=Path, help="generate masks on the fly from this model")
    p.add_argument("--epochs", type=int, help="override training epochs")
    p.set_defaults(func=cmd_train_multi)

    p = sub.add_parser("distill", help="distill the teacher into a video-only student")
    _add_common(p)
    p.add_argument("--teacher", type=Path, help="teacher checkpoint (default OUT/fm.pt)")
    p.add_argument("--masks", type=Path, help="precomputed probability-map directory")
    p.add_argument("--seg-checkpoint", type=Path, help="generate masks on the fly from this model")
    p.add_argument("--w-ulb", type=float, help="unlabeled pseudo-label weight (0 = labels only)")
    p.add_argument("--epochs", type=int, help="override training epochs")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("evaluate", help="metric report for a trained checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, help="model to evaluate (default OUT/fe.pt)")
    p.add_argument("--seg-checkpoint", type=Path, help="also report Dice for this segmentation model")
    p.add_argument("--masks", type=Path, help="probability maps for 4-channel models")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("heatmap", help="saliency overlays and top-gradient dice")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, help="video-only regressor (default OUT/fe.pt)")
    p.set_defaults(func=cmd_heatmap)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
