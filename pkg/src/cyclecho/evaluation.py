"""Metrics, saliency maps, frame-similarity matrices, and report writing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from cyclecho.data import EchoDataset, _save_png, sample_cycle_clip
from cyclecho.segmentation import dice


def mae(preds, labels) -> float:
    """Mean absolute error between paired predictions and labels."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("mae of an empty sample is undefined")
    return float(np.mean(np.abs(preds - labels)))


def r_squared(preds, labels) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size < 2:
        raise ValueError("r_squared needs at least two samples")
    ss_tot = float(np.sum((labels - labels.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("r_squared is undefined for constant labels")
    ss_res = float(np.sum((preds - labels) ** 2))
    return 1.0 - ss_res / ss_tot


def smoothgrad(
    model: torch.nn.Module,
    clip: torch.Tensor,
    n_samples: int = 25,
    sigma: float = 0.1,
    seed: int = 0,
) -> np.ndarray:
    """Noise-averaged absolute input gradients of a clip regressor.

    clip is [C, L, H, W]; sigma is a fraction of the input value range. The
    per-frame map is the channel-mean of |d output / d pixel| averaged over
    n_samples noisy copies. Returns [L, H, W], non-negative.
    """
    model.eval()
    value_range = float(clip.max() - clip.min())
    std = sigma * value_range
    gen = torch.Generator().manual_seed(seed)
    acc = torch.zeros_like(clip)
    for _ in range(max(n_samples, 1)):
        noise = torch.randn(clip.shape, generator=gen, dtype=clip.dtype) * std if std > 0 else 0.0
        x = (clip + noise).detach().requires_grad_(True)
        out = model(x.unsqueeze(0)).sum()
        if not out.requires_grad:  # output does not depend on the input
            continue
        (grad,) = torch.autograd.grad(out, x, allow_unused=True)
        if grad is not None:
            acc += grad.abs()
    acc /= max(n_samples, 1)
    return acc.mean(dim=0).detach().numpy()  # channel mean -> [L, H, W]


def top_gradient_dice(saliency: np.ndarray, label_mask: np.ndarray, k: float = 0.05) -> float:
    """Dice between the top-k fraction of saliency pixels and a label mask.

    Exactly ceil(k * H * W) pixels are kept; ties are broken by row-major scan
    order so the result is reproducible.
    """
    if not 0.0 < k < 1.0:
        raise ValueError(f"k must be in (0, 1), got {k}")
    saliency = np.asarray(saliency)
    label_mask = np.asarray(label_mask)
    if saliency.shape != label_mask.shape:
        raise ValueError(f"shape mismatch: {saliency.shape} vs {label_mask.shape}")
    m = math.ceil(k * saliency.size)
    flat = saliency.reshape(-1)
    order = np.argsort(-flat, kind="stable")  # stable keeps scan order among ties
    top = np.zeros(flat.shape, dtype=bool)
    top[order[:m]] = True
    return dice(top.reshape(saliency.shape), label_mask.astype(bool))


def frame_similarity_matrix(frames) -> np.ndarray:
    """Pairwise frame L2 distances, normalized to [0, 1] by the matrix maximum.

    Accepts any [T, ...] array (raw frames or embeddings); rows are flattened.
    Symmetric with a zero diagonal.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("need at least two frames")
    flat = x.reshape(x.shape[0], -1)
    t = flat.shape[0]
    d = np.zeros((t, t))
    # row-wise differences: identical frames give exact zeros, which the
    # quadratic-expansion shortcut would not
    for a in range(t):
        d[a, a + 1 :] = np.sqrt(((flat[a + 1 :] - flat[a]) ** 2).sum(axis=1))
    d = d + d.T
    peak = d.max()
    return d / peak if peak > 0 else d


def sample_unlabeled_eval_frames(dataset: EchoDataset, ids, seed: int) -> dict[str, int]:
    """One uniformly chosen non-ED/non-ES frame index per sequence, seeded."""
    rng = np.random.default_rng(seed)
    chosen = {}
    for sid in ids:
        info = dataset.info(sid)
        candidates = [t for t in range(info.num_frames) if t not in (info.ed_index, info.es_index)]
        chosen[sid] = int(rng.choice(candidates))
    return chosen


@dataclass(frozen=True)
class MetricReport:
    """Headline numbers of one evaluation run."""

    mae: float
    r2: float
    dice_ed: float
    dice_es: float
    dice_unlabeled: float
    n: int
    seed: int

    def __post_init__(self):
        if self.mae < 0:
            raise ValueError(f"mae must be >= 0, got {self.mae}")
        if self.r2 > 1.0:
            raise ValueError(f"r2 cannot exceed 1, got {self.r2}")
        for name in ("dice_ed", "dice_es", "dice_unlabeled"):
            v = getattr(self, name)
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")


def write_metric_report(report: MetricReport, csv_path: Path | str, text_path: Path | str) -> None:
    fields = ["mae", "r2", "dice_ed", "dice_es", "dice_unlabeled", "n", "seed"]
    with Path(csv_path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        writer.writerow([getattr(report, f) for f in fields])
    lines = [
        f"samples evaluated : {report.n}",
        f"seed              : {report.seed}",
        f"EF MAE            : {report.mae:.3f} points",
        f"EF R^2            : {report.r2:.4f}",
        f"Dice (ED frames)  : {report.dice_ed:.4f}",
        f"Dice (ES frames)  : {report.dice_es:.4f}",
        f"Dice (unlabeled)  : {report.dice_unlabeled:.4f}",
    ]
    Path(text_path).write_text("\n".join(lines) + "\n")


def write_predictions(rows, path: Path | str) -> None:
    """Prediction dump: one row per (id, prediction, label, source)."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "prediction", "label", "source"])
        for r in rows:
            writer.writerow(r)


def saliency_overlay(frame: np.ndarray, saliency: np.ndarray) -> np.ndarray:
    """Blend a per-frame saliency heatmap over a frame -> uint8 [H, W, 3].

    The saliency is normalized per frame to [0, 1]; hot regions shade red to
    yellow over the dimmed grayscale frame.
    """
    gray = frame.astype(np.float32).mean(axis=0) / 255.0  # [H, W]
    s = saliency.astype(np.float32)
    peak = s.max()
    s = s / peak if peak > 0 else s
    base = 0.6 * gray
    out = np.stack(
        [
            np.clip(base + s, 0, 1),  # red
            np.clip(base + 0.6 * s**2, 0, 1),  # toward yellow where strong
            base,
        ],
        axis=-1,
    )
    return (out * 255).astype(np.uint8)


def save_saliency_overlay(frame: np.ndarray, saliency: np.ndarray, path: Path | str) -> None:
    overlay = saliency_overlay(frame, saliency)
    _save_png(np.transpose(overlay, (2, 0, 1)), Path(path))


@torch.no_grad()
def export_embeddings(
    model,
    dataset: EchoDataset,
    ids,
    path: Path | str,
    clip_len: int = 40,
    clip_stride: int = 3,
) -> None:
    """Dump raw per-frame encoder features for external plotting (.npz)."""
    from cyclecho.segmentation import encode_clip

    arrays = {}
    for sid in ids:
        clip = sample_cycle_clip(dataset.frames(sid), clip_len, clip_stride, start=0)
        clip.sequence_id = sid
        emb = encode_clip(model, clip, dataset.stats)
        arrays[sid] = emb.values.detach().numpy()
    np.savez(Path(path), **arrays)
