"""Ejection-fraction video regression and teacher-student distillation.

The teacher consumes 4-channel clips (video plus the segmentation model's
foreground-probability channel) and trains on labeled sequences only. The
student shares the architecture but takes plain 3-channel video; it trains
on labels plus the frozen teacher's pseudo-labels on unlabeled clips, so at
inference time no masks are needed.

Pseudo-labels are computed on the fly for each sampled unlabeled clip, so
teacher and student always see the same frames.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from cyclecho.data import (
    ClipSample,
    DatasetSplit,
    EchoDataset,
    EchoSequence,
    EpochSampler,
    Stats,
    clip_geometry,
    normalize_frames,
    sample_regression_clip,
    _load_png,
)
from cyclecho.models import SegmentationModel, VideoRegressor
from cyclecho.segmentation import _check_finite, infer_masks, make_optimizer

_clamp_count = 0


def reset_clamp_count() -> None:
    global _clamp_count
    _clamp_count = 0


def clamp_count() -> int:
    """How many predictions needed clamping into [0, 100] since the last reset."""
    return _clamp_count


@dataclass(frozen=True)
class EfPrediction:
    """A scalar ejection-fraction value in percent and where it came from."""

    value: float
    sequence_id: str
    source: str  # "teacher" | "student" | "label"


@dataclass(frozen=True)
class RegTrainConfig:
    """Optimization settings for the regression stage."""

    epochs: int = 25
    batch_labeled: int = 20
    batch_unlabeled: int = 10
    lr: float = 1e-4
    momentum: float = 0.9
    optimizer: str = "sgd"
    clip_len: int = 32
    clip_stride: int = 2
    unlabeled_weight: float = 5.0
    augment_shift: int = 0  # max random spatial translation (px) during training
    augment_zoom: float = 0.0  # max relative rescaling during training


@dataclass(frozen=True)
class DistillBreakdown:
    """One distillation iteration; total is exactly lb + weight * ulb."""

    epoch: int
    iteration: int
    lb: float
    ulb: float
    total: float
    unlabeled_weight: float

    def __post_init__(self):
        expected = self.lb + self.unlabeled_weight * self.ulb
        if self.total != expected:
            raise ValueError(f"breakdown total {self.total} != lb + w*ulb = {expected}")


class PrecomputedMaskDir:
    """Foreground-probability maps stored as <root>/<id>/<%06d>.png (uint8/255)."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        if not self.root.exists():
            raise FileNotFoundError(f"mask directory {self.root} does not exist")

    def __call__(self, sequence_id: str, frame_indices: np.ndarray) -> np.ndarray:
        maps = []
        for t in frame_indices:
            path = self.root / sequence_id / f"{int(t):06d}.png"
            arr = _load_png(path)
            if arr.ndim == 3:
                arr = arr[..., 0]
            maps.append(arr.astype(np.float32) / 255.0)
        return np.stack(maps)


class SegmentationMaskSource:
    """Generates probability maps on the fly from a frozen segmentation model."""

    def __init__(self, model: SegmentationModel, dataset: EchoDataset):
        self.model = model
        self.dataset = dataset

    def __call__(self, sequence_id: str, frame_indices: np.ndarray) -> np.ndarray:
        frames = self.dataset.frames(sequence_id)[np.asarray(frame_indices)]
        probs, _ = infer_masks(self.model, frames, self.dataset.stats)
        return probs


def build_video_clip(clip: ClipSample, stats: Stats | None) -> torch.Tensor:
    """Normalized clip tensor [3, L, H, W] for the video-only model."""
    video = torch.from_numpy(normalize_frames(clip.frames, stats))  # [L, 3, H, W]
    return video.permute(1, 0, 2, 3)


def build_multi_input_clip(clip: ClipSample, prob_maps: np.ndarray, stats: Stats | None) -> torch.Tensor:
    """Concatenate the probability channel onto the video: [4, L, H, W].

    prob_maps must hold one map per clip frame, in clip order; the maps stay
    in [0, 1] and are not renormalized.
    """
    prob_maps = np.asarray(prob_maps, dtype=np.float32)
    if prob_maps.shape[0] != clip.frames.shape[0]:
        raise ValueError(
            f"{prob_maps.shape[0]} probability maps for a {clip.frames.shape[0]}-frame clip; "
            "masks must be generated for exactly the clip's source frames"
        )
    if prob_maps.shape[1:] != clip.frames.shape[2:]:
        raise ValueError(
            f"mask size {prob_maps.shape[1:]} does not match frame size {clip.frames.shape[2:]}"
        )
    if prob_maps.min() < 0.0 or prob_maps.max() > 1.0:
        raise ValueError("probability maps must lie in [0, 1]")
    video = build_video_clip(clip, stats)
    mask_channel = torch.from_numpy(prob_maps).unsqueeze(0)  # [1, L, H, W]
    return torch.cat([video, mask_channel], dim=0)


def random_shift(x: torch.Tensor, max_shift: int, rng: np.random.Generator) -> torch.Tensor:
    """Translate a clip tensor [C, L, H, W] by up to max_shift px (edge-padded)."""
    if max_shift <= 0:
        return x
    dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    h, w = x.shape[-2:]
    padded = F.pad(x, (max_shift, max_shift, max_shift, max_shift), mode="replicate")
    return padded[..., max_shift + dy : max_shift + dy + h, max_shift + dx : max_shift + dx + w]


def random_zoom(x: torch.Tensor, zoom: float, rng: np.random.Generator) -> torch.Tensor:
    """Rescale a clip tensor [C, L, H, W] by a random factor in [1/(1+zoom), 1+zoom].

    Zoom preserves the ejection fraction (areas scale together, their ratio
    does not), so it pushes the regressor toward scale-free features.
    """
    if zoom <= 0:
        return x
    h, w = x.shape[-2:]
    s = float(np.exp(rng.uniform(-np.log1p(zoom), np.log1p(zoom))))
    nh, nw = max(int(round(h * s)), 8), max(int(round(w * s)), 8)
    frames = F.interpolate(x.permute(1, 0, 2, 3), size=(nh, nw), mode="bilinear", align_corners=False)
    if nh >= h:  # crop the center
        top, left = (nh - h) // 2, (nw - w) // 2
        frames = frames[..., top : top + h, left : left + w]
    else:  # pad back to size
        ph, pw = h - nh, w - nw
        frames = F.pad(frames, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2), mode="replicate")
    return frames.permute(1, 0, 2, 3)


def _labeled_clip_batch(dataset, ids, clip_rng, cfg, channels, masks=None):
    """Sample one regression clip per id; returns (inputs [B,C,L,H,W], targets)."""
    inputs, targets = [], []
    for sid in ids:
        info = dataset.info(sid)
        clip = sample_regression_clip(dataset.frames(sid), cfg.clip_len, cfg.clip_stride, rng=clip_rng)
        clip.sequence_id = sid
        if channels == 4:
            x = build_multi_input_clip(clip, masks(sid, clip.original_indices), dataset.stats)
        else:
            x = build_video_clip(clip, dataset.stats)
        x = random_zoom(x, cfg.augment_zoom, clip_rng)
        inputs.append(random_shift(x, cfg.augment_shift, clip_rng))
        targets.append(info.ef)
    return torch.stack(inputs), torch.tensor(targets, dtype=torch.float32)


def write_regression_log(rows: list[dict], path: Path | str) -> None:
    if not rows:
        return
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def train_multi_input(
    model: VideoRegressor,
    dataset: EchoDataset,
    split: DatasetSplit,
    masks,
    cfg: RegTrainConfig,
    seed: int,
    log_path: Path | str | None = None,
) -> list[dict]:
    """Fit the 4-channel teacher on labeled clips with mean squared error."""
    if model.in_channels != 4:
        raise ValueError(f"multi-input model must take 4 channels, has {model.in_channels}")
    ids_rng, clip_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
    sampler = EpochSampler(split.labeled, cfg.batch_labeled, ids_rng)
    optimizer = make_optimizer(model, cfg)
    history: list[dict] = []
    iteration = 0
    model.train()
    for epoch in range(cfg.epochs):
        for _ in range(sampler.batches_per_epoch):
            inputs, targets = _labeled_clip_batch(
                dataset, sampler.next_batch(), clip_rng, cfg, channels=4, masks=masks
            )
            loss = F.mse_loss(model(inputs), targets)
            _check_finite(loss, epoch, iteration)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            history.append({"epoch": epoch, "iteration": iteration, "mse": float(loss.item())})
            iteration += 1
    model.eval()
    if log_path is not None:
        write_regression_log(history, log_path)
    return history


def train_video_only(
    model: VideoRegressor,
    dataset: EchoDataset,
    split: DatasetSplit,
    cfg: RegTrainConfig,
    seed: int,
    log_path: Path | str | None = None,
) -> list[dict]:
    """Labeled-only MSE training of a 3-channel model (no teacher, no masks)."""
    if model.in_channels != 3:
        raise ValueError(f"video-only model must take 3 channels, has {model.in_channels}")
    ids_rng, clip_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)[:2]]
    sampler = EpochSampler(split.labeled, cfg.batch_labeled, ids_rng)
    optimizer = make_optimizer(model, cfg)
    history: list[dict] = []
    iteration = 0
    model.train()
    for epoch in range(cfg.epochs):
        for _ in range(sampler.batches_per_epoch):
            inputs, targets = _labeled_clip_batch(
                dataset, sampler.next_batch(), clip_rng, cfg, channels=3
            )
            loss = F.mse_loss(model(inputs), targets)
            _check_finite(loss, epoch, iteration)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            history.append({"epoch": epoch, "iteration": iteration, "mse": float(loss.item())})
            iteration += 1
    model.eval()
    if log_path is not None:
        write_regression_log(history, log_path)
    return history


@torch.no_grad()
def pseudo_label(teacher: VideoRegressor, clip_input: torch.Tensor, sequence_id: str = "") -> EfPrediction:
    """Frozen-teacher prediction for one prepared clip tensor [C, L, H, W]."""
    teacher.eval()
    value = float(teacher(clip_input.unsqueeze(0)).item())
    return EfPrediction(value=value, sequence_id=sequence_id, source="teacher")


def train_distilled(
    student: VideoRegressor,
    dataset: EchoDataset,
    split: DatasetSplit,
    teacher: VideoRegressor,
    masks,
    cfg: RegTrainConfig,
    seed: int,
    log_path: Path | str | None = None,
) -> list[DistillBreakdown]:
    """Distill the teacher into a video-only student on labels + pseudo-labels.

    The teacher stays frozen throughout. With unlabeled_weight == 0 the
    unlabeled branch is never sampled or evaluated, reducing exactly to
    labeled-only training.
    """
    if student.in_channels != 3:
        raise ValueError(f"student must take 3-channel clips, has {student.in_channels}")
    if teacher.in_channels != 4:
        raise ValueError(f"teacher must take 4-channel clips, has {teacher.in_channels}")
    w = cfg.unlabeled_weight
    streams = np.random.SeedSequence(seed).spawn(4)
    ids_rng, clip_rng = np.random.default_rng(streams[0]), np.random.default_rng(streams[1])
    ulb_ids_rng, ulb_clip_rng = np.random.default_rng(streams[2]), np.random.default_rng(streams[3])
    sampler = EpochSampler(split.labeled, cfg.batch_labeled, ids_rng)
    unlabeled = list(split.unlabeled)
    if w > 0 and not unlabeled:
        raise ValueError("distillation with unlabeled_weight > 0 needs unlabeled sequences")
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    optimizer = make_optimizer(student, cfg)
    history: list[DistillBreakdown] = []
    iteration = 0
    student.train()
    for epoch in range(cfg.epochs):
        for _ in range(sampler.batches_per_epoch):
            inputs, targets = _labeled_clip_batch(
                dataset, sampler.next_batch(), clip_rng, cfg, channels=3
            )
            l_lb = F.mse_loss(student(inputs), targets)
            if w > 0:
                replace = cfg.batch_unlabeled > len(unlabeled)
                chosen = ulb_ids_rng.choice(
                    np.asarray(unlabeled, dtype=object), size=cfg.batch_unlabeled, replace=replace
                )
                student_in, teacher_targets = [], []
                for sid in (str(s) for s in chosen):
                    clip = sample_regression_clip(
                        dataset.frames(sid), cfg.clip_len, cfg.clip_stride, rng=ulb_clip_rng
                    )
                    clip.sequence_id = sid
                    # teacher and student see the identical (augmented) frames
                    four = build_multi_input_clip(clip, masks(sid, clip.original_indices), dataset.stats)
                    four = random_zoom(four, cfg.augment_zoom, ulb_clip_rng)
                    four = random_shift(four, cfg.augment_shift, ulb_clip_rng)
                    student_in.append(four[:3])
                    teacher_targets.append(pseudo_label(teacher, four, sid).value)
                l_ulb = F.mse_loss(
                    student(torch.stack(student_in)),
                    torch.tensor(teacher_targets, dtype=torch.float32),
                )
                total = l_lb + w * l_ulb
                ulb_val = float(l_ulb.item())
            else:
                total = l_lb
                ulb_val = 0.0
            _check_finite(total, epoch, iteration)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            lb_val = float(l_lb.item())
            history.append(
                DistillBreakdown(
                    epoch=epoch,
                    iteration=iteration,
                    lb=lb_val,
                    ulb=ulb_val,
                    total=lb_val + w * ulb_val,
                    unlabeled_weight=w,
                )
            )
            iteration += 1
    student.eval()
    if log_path is not None:
        write_regression_log(
            [
                {
                    "epoch": h.epoch,
                    "iteration": h.iteration,
                    "lb": h.lb,
                    "ulb": h.ulb,
                    "total": h.total,
                }
                for h in history
            ],
            log_path,
        )
    return history


@torch.no_grad()
def predict_ef(
    model: VideoRegressor,
    seq: EchoSequence,
    stats: Stats | None,
    masks=None,
    cfg: RegTrainConfig = RegTrainConfig(),
    rng: np.random.Generator | None = None,
    clips: int = 1,
) -> EfPrediction:
    """Predict ejection fraction for a whole video.

    By default one clip starting at index 0 is used (deterministic
    evaluation); pass an rng for a random start or clips > 1 to average over
    evenly spaced starts. Values are clamped to [0, 100] at inference only.
    """
    global _clamp_count
    model.eval()
    _, _, n_starts = clip_geometry(seq.frames.shape[0], cfg.clip_len, cfg.clip_stride)
    if rng is not None:
        starts = [int(rng.integers(0, n_starts)) for _ in range(clips)]
    elif clips == 1:
        starts = [0]
    else:
        starts = [int(round(i * (n_starts - 1) / max(clips - 1, 1))) for i in range(clips)]
    values = []
    for start in starts:
        clip = sample_regression_clip(seq.frames, cfg.clip_len, cfg.clip_stride, start=start)
        clip.sequence_id = seq.sequence_id
        if model.in_channels == 4:
            if masks is None:
                raise ValueError("a 4-channel model needs a mask source for prediction")
            x = build_multi_input_clip(clip, masks(seq.sequence_id, clip.original_indices), stats)
        else:
            x = build_video_clip(clip, stats)
        values.append(float(model(x.unsqueeze(0)).item()))
    raw = float(np.mean(values))
    value = min(max(raw, 0.0), 100.0)
    if value != raw:
        _clamp_count += 1
    source = "teacher" if model.in_channels == 4 else "student"
    return EfPrediction(value=value, sequence_id=seq.sequence_id, source=source)
