"""Stage runners tying the modules into reproducible experiment steps.

The CLI calls these; tests drive them directly. Every stage takes explicit
seeds and returns plain data so runs can be compared across configurations.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import torch

from cyclecho.config import RunConfig
from cyclecho.data import DatasetSplit, EchoDataset, _save_png
from cyclecho.evaluation import mae, r_squared, sample_unlabeled_eval_frames
from cyclecho.models import (
    SegmentationModel,
    VideoRegressor,
    build_segmentation_model,
    build_video_regressor,
)
from cyclecho.regression import (
    EfPrediction,
    PrecomputedMaskDir,
    SegmentationMaskSource,
    predict_ef,
    train_distilled,
    train_multi_input,
)
from cyclecho.segmentation import dice, infer_masks, train_joint, train_supervised


def seeded_segmentation_model(arch: str, seed: int) -> SegmentationModel:
    torch.manual_seed(seed)
    return build_segmentation_model(arch)


def seeded_regressor(arch: str, in_channels: int, seed: int) -> VideoRegressor:
    torch.manual_seed(seed)
    return build_video_regressor(arch, in_channels=in_channels)


def train_segmentation_stage(
    cfg: RunConfig,
    dataset: EchoDataset,
    split: DatasetSplit,
    seed: int,
    joint: bool = True,
    weight: float | None = None,
    log_path: Path | str | None = None,
) -> SegmentationModel:
    """Train the segmentation model, jointly with the cyclical loss or plain."""
    model = seeded_segmentation_model(cfg.segmentation.arch, seed)
    if joint:
        train_joint(
            model,
            dataset,
            split,
            cfg.partition(),
            cfg.cycle_config(weight=weight),
            cfg.seg_train_config(),
            seed=seed,
            log_path=log_path,
        )
    else:
        train_supervised(model, dataset, split, cfg.seg_train_config(), seed=seed, log_path=log_path)
    return model


def precompute_masks(
    model: SegmentationModel,
    dataset: EchoDataset,
    ids,
    out_dir: Path | str,
    batch: int = 64,
) -> Path:
    """Write per-frame foreground-probability maps as uint8 PNGs."""
    out_dir = Path(out_dir)
    for sid in ids:
        probs, _ = infer_masks(model, dataset.frames(sid), dataset.stats, batch=batch)
        arr = np.round(probs * 255.0).astype(np.uint8)
        for t in range(arr.shape[0]):
            _save_png(arr[t], out_dir / sid / f"{t:06d}.png")
    return out_dir


def evaluate_segmentation(
    model: SegmentationModel,
    dataset: EchoDataset,
    ids,
    seed: int,
    threshold: float = 0.5,
) -> dict:
    """Dice on labeled ED/ES frames plus one seeded unlabeled frame per video.

    Unlabeled-frame Dice needs per-frame ground truth (synthetic corpora);
    it is NaN when unavailable.
    """
    unlabeled_frames = sample_unlabeled_eval_frames(dataset, ids, seed)
    ed_scores, es_scores, ulb_scores = [], [], []
    for sid in ids:
        info = dataset.info(sid)
        seq = dataset.sequence(sid)
        wanted = [info.ed_index, info.es_index, unlabeled_frames[sid]]
        probs, masks = infer_masks(model, seq.frames[wanted], dataset.stats, threshold=threshold)
        ed_scores.append(dice(masks[0], seq.ed_mask))
        es_scores.append(dice(masks[1], seq.es_mask))
        if dataset.has_frame_masks(sid):
            ulb_scores.append(dice(masks[2], dataset.frame_mask(sid, unlabeled_frames[sid])))
    return {
        "dice_ed": float(np.mean(ed_scores)),
        "dice_es": float(np.mean(es_scores)),
        "dice_unlabeled": float(np.mean(ulb_scores)) if ulb_scores else float("nan"),
    }


def train_teacher_stage(
    cfg: RunConfig,
    dataset: EchoDataset,
    split: DatasetSplit,
    masks,
    seed: int,
    log_path: Path | str | None = None,
) -> VideoRegressor:
    model = seeded_regressor(cfg.regression.arch, 4, seed)
    train_multi_input(model, dataset, split, masks, cfg.reg_train_config(), seed=seed, log_path=log_path)
    return model


def train_student_stage(
    cfg: RunConfig,
    dataset: EchoDataset,
    split: DatasetSplit,
    teacher: VideoRegressor,
    masks,
    seed: int,
    weight: float | None = None,
    log_path: Path | str | None = None,
) -> VideoRegressor:
    model = seeded_regressor(cfg.regression.arch, 3, seed)
    reg_cfg = cfg.reg_train_config()
    if weight is not None:
        reg_cfg = dataclasses.replace(reg_cfg, unlabeled_weight=weight)
    train_distilled(model, dataset, split, teacher, masks, reg_cfg, seed=seed, log_path=log_path)
    return model


def evaluate_regression(
    model: VideoRegressor,
    dataset: EchoDataset,
    ids,
    cfg: RunConfig,
    masks=None,
) -> dict:
    """Deterministic per-video predictions plus MAE / R^2 against labels."""
    preds: list[EfPrediction] = []
    labels = []
    reg_cfg = cfg.reg_train_config()
    for sid in ids:
        seq = dataset.sequence(sid)
        p = predict_ef(
            model, seq, dataset.stats, masks=masks, cfg=reg_cfg, clips=cfg.regression.eval_clips
        )
        preds.append(p)
        labels.append(seq.ef)
    values = [p.value for p in preds]
    return {
        "predictions": preds,
        "labels": labels,
        "mae": mae(values, labels),
        "r2": r_squared(values, labels) if len(values) >= 2 else float("nan"),
    }


def mask_source_from_args(masks_dir, seg_model, dataset):
    """Precomputed mask dir wins; otherwise generate from the model on the fly."""
    if masks_dir is not None:
        return PrecomputedMaskDir(masks_dir)
    if seg_model is not None:
        return SegmentationMaskSource(seg_model, dataset)
    raise ValueError("need either a precomputed mask directory or a segmentation model")
