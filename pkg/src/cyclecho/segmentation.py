"""Chamber segmentation: supervised loss, joint training with the cyclical
consistency loss, full-video mask inference, and the Dice metric.

Each iteration draws a batch of labeled sequences and supervises their two
labeled frames with pixel-wise cross-entropy; when the cyclical weight is
positive, one strided clip is drawn separately from the union of labeled and
unlabeled sequences and its encoder embeddings feed the cyclical loss. The
two samplers own independent seeded streams, so a run with cyclical weight 0
is bit-identical to the plain supervised trainer given the same seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from cyclecho.cycle import (
    CycleConfig,
    EmbeddingSequence,
    RegionPartition,
    cycle_loss,
    sample_template_starts,
)
from cyclecho.data import (
    ClipSample,
    DatasetSplit,
    EchoDataset,
    EchoSequence,
    EpochSampler,
    Stats,
    normalize_frames,
    sample_cycle_clip,
    sample_labeled_frames,
)
from cyclecho.models import SegmentationModel


@dataclass(frozen=True)
class LossBreakdown:
    """One logged iteration; total is exactly seg + cycle_weight * cycle."""

    epoch: int
    iteration: int
    seg: float
    cycle: float
    total: float
    cycle_weight: float

    def __post_init__(self):
        expected = self.seg + self.cycle_weight * self.cycle
        if self.total != expected:
            raise ValueError(f"breakdown total {self.total} != seg + w*cycle = {expected}")


@dataclass(frozen=True)
class SegTrainConfig:
    """Optimization settings for segmentation training."""

    epochs: int = 25
    batch: int = 20
    lr: float = 1e-5
    momentum: float = 0.9
    optimizer: str = "sgd"
    clip_len: int = 40
    clip_stride: int = 3
    clips_per_iter: int = 1
    threshold: float = 0.5


def seg_loss(logits: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Mean pixel-wise binary cross-entropy over the whole batch."""
    if logits.shape != masks.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs masks {tuple(masks.shape)}")
    return F.binary_cross_entropy_with_logits(logits, masks.float())


def encode_clip(model: SegmentationModel, clip: ClipSample, stats: Stats | None) -> EmbeddingSequence:
    """Run every clip frame through the shared encoder, order preserved."""
    if clip.frames.ndim != 4 or clip.frames.shape[1] != 3:
        raise ValueError(f"expected clip frames [L, 3, H, W], got {clip.frames.shape}")
    frames = torch.from_numpy(normalize_frames(clip.frames, stats))
    emb = model.embed(frames)
    return EmbeddingSequence(values=emb, clip_indices=[int(i) for i in clip.original_indices])


def make_optimizer(model: torch.nn.Module, cfg) -> torch.optim.Optimizer:
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr)
    raise ValueError(f"unknown optimizer '{cfg.optimizer}'")


def write_loss_log(history: list[LossBreakdown], path: Path | str) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "iteration", "seg", "css", "total"])
        for h in history:
            writer.writerow([h.epoch, h.iteration, repr(h.seg), repr(h.cycle), repr(h.total)])


def _supervised_batch(dataset: EchoDataset, sampler: EpochSampler, stats: Stats | None):
    items = sample_labeled_frames(dataset, sampler)
    frames = np.stack([f for item in items for f in (item[0], item[2])])
    masks = np.stack([m for item in items for m in (item[1], item[3])])
    frames_t = torch.from_numpy(normalize_frames(frames, stats))
    masks_t = torch.from_numpy(masks.astype(np.float32))
    return frames_t, masks_t


def _check_finite(value: torch.Tensor, epoch: int, iteration: int) -> None:
    if not torch.isfinite(value):
        raise RuntimeError(
            f"training diverged: non-finite loss {value.item()} at epoch {epoch} "
            f"iteration {iteration}; lower the learning rate"
        )


def train_joint(
    model: SegmentationModel,
    dataset: EchoDataset,
    split: DatasetSplit,
    partition: RegionPartition,
    cycle_cfg: CycleConfig,
    cfg: SegTrainConfig,
    seed: int,
    log_path: Path | str | None = None,
) -> list[LossBreakdown]:
    """Minimize seg loss + weight * cyclical loss; returns the per-iteration log.

    With cycle_cfg.weight == 0 the cyclical branch is never sampled or
    computed, reducing exactly to supervised training.
    """
    cycle_cfg.validate_against(partition)
    sup_rng, clip_rng, start_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)
    ]
    sampler = EpochSampler(split.labeled, cfg.batch, sup_rng)
    union_ids = list(split.all_ids)
    optimizer = make_optimizer(model, cfg)
    history: list[LossBreakdown] = []
    iteration = 0
    model.train()
    for epoch in range(cfg.epochs):
        for _ in range(sampler.batches_per_epoch):
            frames_t, masks_t = _supervised_batch(dataset, sampler, dataset.stats)
            l_seg = seg_loss(model(frames_t), masks_t)
            if cycle_cfg.weight > 0:
                embs = []
                for _ in range(cfg.clips_per_iter):
                    sid = union_ids[int(clip_rng.integers(len(union_ids)))]
                    clip = sample_cycle_clip(
                        dataset.frames(sid), cfg.clip_len, cfg.clip_stride, rng=clip_rng
                    )
                    clip.sequence_id = sid
                    embs.append(encode_clip(model, clip, dataset.stats))
                starts = sample_template_starts(len(embs), cycle_cfg, start_rng)
                l_cyc = cycle_loss(embs, partition, cycle_cfg, starts)
                total = l_seg + cycle_cfg.weight * l_cyc.to(l_seg.dtype)
                cyc_val = float(l_cyc.item())
            else:
                total = l_seg
                cyc_val = 0.0
            _check_finite(total, epoch, iteration)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            seg_val = float(l_seg.item())
            history.append(
                LossBreakdown(
                    epoch=epoch,
                    iteration=iteration,
                    seg=seg_val,
                    cycle=cyc_val,
                    total=seg_val + cycle_cfg.weight * cyc_val,
                    cycle_weight=cycle_cfg.weight,
                )
            )
            iteration += 1
    model.eval()
    if log_path is not None:
        write_loss_log(history, log_path)
    return history


def train_supervised(
    model: SegmentationModel,
    dataset: EchoDataset,
    split: DatasetSplit,
    cfg: SegTrainConfig,
    seed: int,
    log_path: Path | str | None = None,
) -> list[LossBreakdown]:
    """Plain supervised baseline: labeled frames and cross-entropy only."""
    sup_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[0])
    sampler = EpochSampler(split.labeled, cfg.batch, sup_rng)
    optimizer = make_optimizer(model, cfg)
    history: list[LossBreakdown] = []
    iteration = 0
    model.train()
    for epoch in range(cfg.epochs):
        for _ in range(sampler.batches_per_epoch):
            frames_t, masks_t = _supervised_batch(dataset, sampler, dataset.stats)
            l_seg = seg_loss(model(frames_t), masks_t)
            _check_finite(l_seg, epoch, iteration)
            optimizer.zero_grad()
            l_seg.backward()
            optimizer.step()
            seg_val = float(l_seg.item())
            history.append(
                LossBreakdown(
                    epoch=epoch,
                    iteration=iteration,
                    seg=seg_val,
                    cycle=0.0,
                    total=seg_val,
                    cycle_weight=0.0,
                )
            )
            iteration += 1
    model.eval()
    if log_path is not None:
        write_loss_log(history, log_path)
    return history


@torch.no_grad()
def infer_masks(
    model: SegmentationModel,
    seq: EchoSequence | np.ndarray,
    stats: Stats | None,
    threshold: float = 0.5,
    batch: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame foreground probability maps and thresholded masks for a video."""
    frames = seq.frames if isinstance(seq, EchoSequence) else seq
    model.eval()
    probs = []
    for lo in range(0, frames.shape[0], batch):
        chunk = torch.from_numpy(normalize_frames(frames[lo : lo + batch], stats))
        probs.append(torch.sigmoid(model(chunk)).numpy())
    prob_maps = np.concatenate(probs, axis=0).astype(np.float32)
    return prob_maps, prob_maps >= threshold


def dice(pred: np.ndarray, label: np.ndarray) -> float:
    """Overlap score 2|A∩B| / (|A|+|B|); two empty masks count as a perfect 1.0."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {label.shape}")
    for arr, name in ((pred, "pred"), (label, "label")):
        if arr.dtype != bool and np.setdiff1d(np.unique(arr), [0, 1]).size:
            raise ValueError(f"{name} mask must be binary")
    a = pred.astype(bool)
    b = label.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom
