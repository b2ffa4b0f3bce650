"""Dataset layout, label splitting, clip sampling, and the synthetic corpus.

On-disk layout under a dataset root:

    manifest.csv                     id,split,num_frames,fps,ef,ed_index,es_index
    frames/<id>/<000000..>.png       8-bit RGB frames
    masks/<id>/ed.png, es.png        labeled chamber masks (0 or 255)
    masks/<id>/<000000..>.png        optional per-frame ground truth (synthetic data)
    stats.json                       per-channel mean/std over the training split

Empty ef/ed_index/es_index fields in the manifest mark a sequence as
unlabeled. Indices are 0-based everywhere.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ["id", "split", "num_frames", "fps", "ef", "ed_index", "es_index"]
STATS_NAME = "stats.json"


class ValidationError(ValueError):
    """A dataset or manifest entry violates its contract."""


# ---------------------------------------------------------------- PNG helpers


def _save_png(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if arr.ndim == 3:  # [3, H, W] -> HWC
        arr = np.transpose(arr, (1, 2, 0))
    Image.fromarray(arr).save(path)


def _load_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img)


def load_frame(path: Path) -> np.ndarray:
    """Read one RGB frame as uint8 [3, H, W]."""
    arr = _load_png(path)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return np.transpose(arr[..., :3], (2, 0, 1))


def load_mask(path: Path, sequence_id: str = "") -> np.ndarray:
    """Read a binary mask PNG; pixel values must be exactly 0 or 255."""
    arr = _load_png(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    bad = np.setdiff1d(np.unique(arr), [0, 255])
    if bad.size:
        raise ValidationError(
            f"mask {path} for sequence '{sequence_id}' has non-binary values {bad.tolist()}"
        )
    return arr > 127


# ---------------------------------------------------------------- core types


@dataclass
class EchoSequence:
    """One video with optional ejection-fraction label and chamber masks."""

    sequence_id: str
    frames: np.ndarray  # [T, 3, H, W] uint8
    fps: float
    ef: float | None = None
    ed_index: int | None = None
    es_index: int | None = None
    ed_mask: np.ndarray | None = None  # [H, W] bool
    es_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.ef is not None:
            if not 0.0 <= self.ef <= 100.0:
                raise ValidationError(f"sequence '{self.sequence_id}': ef {self.ef} outside [0, 100]")
            missing = [
                name
                for name in ("ed_index", "es_index", "ed_mask", "es_mask")
                if getattr(self, name) is None
            ]
            if missing:
                raise ValidationError(
                    f"sequence '{self.sequence_id}' has an ef label but is missing {missing}; "
                    "labels come as an (ef, ed, es) triple"
                )
        if self.ed_index is not None and self.ed_index == self.es_index:
            raise ValidationError(
                f"sequence '{self.sequence_id}': ed_index and es_index are both {self.ed_index}"
            )

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def labeled(self) -> bool:
        return self.ef is not None


@dataclass(frozen=True)
class SequenceInfo:
    """One manifest row."""

    sequence_id: str
    split: str
    num_frames: int
    fps: float
    ef: float | None
    ed_index: int | None
    es_index: int | None

    @property
    def labeled(self) -> bool:
        return self.ef is not None


@dataclass(frozen=True)
class Stats:
    """Per-channel mean/std of frame intensities in [0, 1]."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def save(self, path: Path) -> None:
        path.write_text(json.dumps({"mean": list(self.mean), "std": list(self.std)}, indent=2))

    @classmethod
    def load(cls, path: Path) -> "Stats":
        raw = json.loads(path.read_text())
        return cls(mean=tuple(raw["mean"]), std=tuple(raw["std"]))


def normalize_frames(frames: np.ndarray, stats: Stats | None) -> np.ndarray:
    """uint8 [..., 3, H, W] -> float32, per-channel standardized when stats given."""
    x = frames.astype(np.float32) / 255.0
    if stats is not None:
        mean = np.asarray(stats.mean, dtype=np.float32).reshape(3, 1, 1)
        std = np.asarray(stats.std, dtype=np.float32).reshape(3, 1, 1)
        x = (x - mean) / np.maximum(std, 1e-6)
    return x


class EchoDataset:
    """Immutable index over a dataset root with lazy, optionally cached frames."""

    def __init__(self, root: Path | str, records: dict[str, SequenceInfo], stats: Stats | None, cache_frames: bool = True):
        self.root = Path(root)
        self._records = dict(records)
        self.stats = stats
        self._cache_frames = cache_frames
        self._frame_cache: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._records)

    def ids(self, split: str | None = None) -> list[str]:
        if split is None:
            return sorted(self._records)
        return sorted(i for i, r in self._records.items() if r.split == split)

    def info(self, sequence_id: str) -> SequenceInfo:
        return self._records[sequence_id]

    def frame_dir(self, sequence_id: str) -> Path:
        return self.root / "frames" / sequence_id

    def mask_dir(self, sequence_id: str) -> Path:
        return self.root / "masks" / sequence_id

    def frames(self, sequence_id: str) -> np.ndarray:
        if sequence_id in self._frame_cache:
            return self._frame_cache[sequence_id]
        info = self._records[sequence_id]
        fdir = self.frame_dir(sequence_id)
        frames = np.stack([load_frame(fdir / f"{t:06d}.png") for t in range(info.num_frames)])
        if self._cache_frames:
            self._frame_cache[sequence_id] = frames
        return frames

    def sequence(self, sequence_id: str) -> EchoSequence:
        info = self._records[sequence_id]
        ed_mask = es_mask = None
        if info.labeled:
            ed_mask = load_mask(self.mask_dir(sequence_id) / "ed.png", sequence_id)
            es_mask = load_mask(self.mask_dir(sequence_id) / "es.png", sequence_id)
        return EchoSequence(
            sequence_id=sequence_id,
            frames=self.frames(sequence_id),
            fps=info.fps,
            ef=info.ef,
            ed_index=info.ed_index,
            es_index=info.es_index,
            ed_mask=ed_mask,
            es_mask=es_mask,
        )

    def has_frame_masks(self, sequence_id: str) -> bool:
        return (self.mask_dir(sequence_id) / "000000.png").exists()

    def frame_mask(self, sequence_id: str, t: int) -> np.ndarray:
        """Per-frame ground-truth mask (synthetic corpora only)."""
        return load_mask(self.mask_dir(sequence_id) / f"{t:06d}.png", sequence_id)


def _opt_float(text: str) -> float | None:
    return float(text) if text.strip() else None


def _opt_int(text: str) -> int | None:
    return int(text) if text.strip() else None


def load_manifest(root: Path | str, cache_frames: bool = True) -> EchoDataset:
    """Index a dataset root, validating labels and mask presence."""
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise ValidationError(f"no {MANIFEST_NAME} under {root}")
    records: dict[str, SequenceInfo] = {}
    with manifest.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise ValidationError(
                f"manifest header {reader.fieldnames} does not match {MANIFEST_FIELDS}"
            )
        for row in reader:
            info = SequenceInfo(
                sequence_id=row["id"],
                split=row["split"],
                num_frames=int(row["num_frames"]),
                fps=float(row["fps"]),
                ef=_opt_float(row["ef"]),
                ed_index=_opt_int(row["ed_index"]),
                es_index=_opt_int(row["es_index"]),
            )
            if info.sequence_id in records:
                raise ValidationError(f"duplicate sequence id '{info.sequence_id}' in manifest")
            records[info.sequence_id] = info

    for info in records.values():
        fdir = root / "frames" / info.sequence_id
        if not (fdir / "000000.png").exists():
            raise ValidationError(f"sequence '{info.sequence_id}': no frames under {fdir}")
        if info.labeled:
            if info.ed_index is None or info.es_index is None:
                raise ValidationError(
                    f"sequence '{info.sequence_id}' has an ef label but no ed/es frame indices"
                )
            if info.ed_index == info.es_index:
                raise ValidationError(
                    f"sequence '{info.sequence_id}': ed_index equals es_index ({info.ed_index})"
                )
            for mask_name in ("ed.png", "es.png"):
                mpath = root / "masks" / info.sequence_id / mask_name
                if not mpath.exists():
                    raise ValidationError(
                        f"sequence '{info.sequence_id}' is labeled but mask {mpath} is missing"
                    )

    stats_path = root / STATS_NAME
    stats = Stats.load(stats_path) if stats_path.exists() else None
    return EchoDataset(root, records, stats, cache_frames=cache_frames)


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class DatasetSplit:
    """Partition of the training ids into labeled and unlabeled sets."""

    labeled: tuple[str, ...]
    unlabeled: tuple[str, ...]
    seed: int

    @property
    def all_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.labeled + self.unlabeled))


def split_labels(dataset: EchoDataset | Sequence[str], fraction: float, seed: int, split: str = "train") -> DatasetSplit:
    """Keep a seeded-shuffle prefix of floor(fraction * N) ids as labeled."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"label fraction must be in (0, 1], got {fraction}")
    if isinstance(dataset, EchoDataset):
        ids = dataset.ids(split)
    else:
        ids = sorted(dataset)
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(np.asarray(ids, dtype=object)))
    n_labeled = math.floor(fraction * len(ids) + 1e-9)
    return DatasetSplit(
        labeled=tuple(sorted(order[:n_labeled])),
        unlabeled=tuple(sorted(order[n_labeled:])),
        seed=seed,
    )


# ---------------------------------------------------------------- mirroring


def mirror_index_map(length: int) -> np.ndarray:
    """Index map realizing the endpoint-reflected doubling of a sequence.

    The output has 2T-1 entries and every adjacent pair of entries differs by
    exactly one source index, so no temporal discontinuity is introduced.
    """
    if length <= 0:
        raise ValueError(f"cannot mirror a sequence of length {length}")
    pivot = max(length // 2, 1)  # 1-based pivot; floor(T/2) for odd T
    one_based = list(range(pivot, 0, -1)) + list(range(2, length + 1)) + list(range(length - 1, pivot - 1, -1))
    return np.asarray(one_based) - 1


def temporal_mirror(frames: np.ndarray) -> np.ndarray:
    """Reflect a sequence at both endpoints, returning 2T-1 frames."""
    return frames[mirror_index_map(frames.shape[0])]


# ---------------------------------------------------------------- clip sampling


@dataclass
class ClipSample:
    """A strided frame window. source_indices are positions in the (possibly
    mirrored) sequence and are strictly ascending with constant stride;
    original_indices map each clip frame back to a frame of the raw video."""

    frames: np.ndarray  # [L, 3, H, W] uint8
    source_indices: np.ndarray
    original_indices: np.ndarray
    sequence_id: str
    stride: int

    @property
    def span(self) -> int:
        return (len(self.source_indices) - 1) * self.stride + 1


def clip_geometry(num_frames: int, length: int, stride: int) -> tuple[int, int, int]:
    """Resolve (effective stride, mirror count, valid start count) for a clip.

    Short sequences degrade gracefully: first the stride is reduced to the
    largest feasible value >= 1, then the sequence is mirror-doubled until the
    required span fits.
    """
    if length < 1 or stride < 1:
        raise ValueError(f"clip length and stride must be >= 1, got {length}, {stride}")
    if num_frames < 1:
        raise ValueError(f"cannot sample a clip from {num_frames} frames")
    eff = stride
    if (length - 1) * eff + 1 > num_frames and length > 1:
        eff = max(1, (num_frames - 1) // (length - 1))
    span = (length - 1) * eff + 1
    padded, mirrors = num_frames, 0
    while span > padded:
        if padded == 1:
            raise ValueError(f"a single-frame sequence cannot cover a clip of {length} frames")
        padded = 2 * padded - 1
        mirrors += 1
    return eff, mirrors, padded - span + 1


def sample_clip(
    frames: np.ndarray,
    length: int,
    stride: int,
    rng: np.random.Generator | None = None,
    start: int | None = None,
    sequence_id: str = "",
) -> ClipSample:
    """Cut a strided clip, choosing the start uniformly unless one is given."""
    num_frames = frames.shape[0]
    eff, mirrors, n_starts = clip_geometry(num_frames, length, stride)
    index_map = np.arange(num_frames)
    for _ in range(mirrors):
        index_map = index_map[mirror_index_map(index_map.shape[0])]
    if start is None:
        if rng is None:
            raise ValueError("either a start index or an rng is required")
        start = int(rng.integers(0, n_starts))
    elif not 0 <= start < n_starts:
        raise ValueError(f"clip start {start} outside valid range [0, {n_starts})")
    source = start + eff * np.arange(length)
    original = index_map[source]
    return ClipSample(
        frames=frames[original],
        source_indices=source,
        original_indices=original,
        sequence_id=sequence_id,
        stride=eff,
    )


def sample_cycle_clip(
    seq: EchoSequence | np.ndarray,
    length: int = 40,
    stride: int = 3,
    rng: np.random.Generator | None = None,
    start: int | None = None,
) -> ClipSample:
    """Clip for the cyclical-consistency loss: 40 frames, 1 of every 3 (118-frame span)."""
    frames = seq.frames if isinstance(seq, EchoSequence) else seq
    sid = seq.sequence_id if isinstance(seq, EchoSequence) else ""
    return sample_clip(frames, length, stride, rng=rng, start=start, sequence_id=sid)


def sample_regression_clip(
    seq: EchoSequence | np.ndarray,
    length: int = 32,
    stride: int = 2,
    rng: np.random.Generator | None = None,
    start: int | None = None,
) -> ClipSample:
    """Clip for ejection-fraction regression: 32 frames, 1 of every 2 (63-frame span)."""
    frames = seq.frames if isinstance(seq, EchoSequence) else seq
    sid = seq.sequence_id if isinstance(seq, EchoSequence) else ""
    return sample_clip(frames, length, stride, rng=rng, start=start, sequence_id=sid)


class EpochSampler:
    """Yields batches of ids, each epoch a fresh permutation without replacement.

    If the pool is smaller than the batch, the whole pool is used once and the
    remainder is drawn with replacement (with a one-time warning).
    """

    def __init__(self, ids: Sequence[str], batch: int, rng: np.random.Generator):
        if not ids:
            raise ValueError("cannot sample from an empty id pool")
        if batch < 1:
            raise ValueError(f"batch must be >= 1, got {batch}")
        self.ids = list(ids)
        self.batch = batch
        self.rng = rng
        self.epoch = 0
        self._queue: list[str] = []
        self._warned = False

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.ids) / self.batch)

    def next_batch(self) -> list[str]:
        if self.batch > len(self.ids):
            if not self._warned:
                warnings.warn(
                    f"labeled pool ({len(self.ids)}) smaller than batch ({self.batch}); "
                    "sampling with replacement after exhaustion"
                )
                self._warned = True
            full = list(self.rng.permutation(np.asarray(self.ids, dtype=object)))
            extra = list(self.rng.choice(np.asarray(self.ids, dtype=object), size=self.batch - len(self.ids)))
            self.epoch += 1
            return [str(i) for i in full + extra]
        if not self._queue:
            self._queue = [str(i) for i in self.rng.permutation(np.asarray(self.ids, dtype=object))]
        take, self._queue = self._queue[: self.batch], self._queue[self.batch :]
        if not self._queue:
            self.epoch += 1
        return take


def sample_labeled_frames(
    dataset: EchoDataset, sampler: EpochSampler
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    """One supervised batch: per sequence the (ed frame, ed mask, es frame, es mask)."""
    out = []
    for sid in sampler.next_batch():
        seq = dataset.sequence(sid)
        if not seq.labeled:
            raise ValueError(f"sequence '{sid}' in the labeled pool has no labels")
        out.append(
            (seq.frames[seq.ed_index], seq.ed_mask, seq.frames[seq.es_index], seq.es_mask)
        )
    return out


# ---------------------------------------------------------------- synthetic corpus


@dataclass(frozen=True)
class SynthParams:
    """Knobs of the synthetic cyclical-video generator."""

    height: int = 64
    width: int = 64
    period_range: tuple[int, int] = (45, 60)  # source frames per cycle
    cycles_range: tuple[float, float] = (2.4, 3.2)
    ef_range: tuple[float, float] = (35.0, 70.0)
    area_range: tuple[float, float] = (0.09, 0.12)  # end-diastole area / frame area
    noise: float = 0.10
    texture: float = 0.10
    edge_softness: float = 1.2  # px; 0 gives hard edges
    distractors: int = 2
    fps: float = 50.0

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValueError(f"frame size {self.height}x{self.width} too small")
        if not (0.0 < self.area_range[0] <= self.area_range[1] < 0.5):
            raise ValueError(f"bad chamber area range {self.area_range}")
        if self.period_range[0] < 4:
            raise ValueError(f"period must be >= 4 frames, got {self.period_range[0]}")
        if self.period_range[0] > self.period_range[1]:
            raise ValueError(f"bad period range {self.period_range}")
        if self.cycles_range[0] < 2.0:
            raise ValueError(
                f"videos must cover at least two cycles, got {self.cycles_range[0]}"
            )
        if not (0.0 < self.ef_range[0] <= self.ef_range[1] < 100.0):
            raise ValueError(f"bad ef range {self.ef_range}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")


@dataclass
class SyntheticSequence:
    """A generated video plus its full ground truth."""

    sequence_id: str
    frames: np.ndarray  # [T, 3, H, W] uint8
    masks: np.ndarray  # [T, H, W] bool
    ef: float
    ed_index: int
    es_index: int
    fps: float


def es_area_for_ef(ef: float, ed_area: float = 1.0) -> float:
    """Invert the volume proxy (volume ~ area^{3/2}) to get the end-systole area."""
    if not 0.0 < ef < 100.0:
        raise ValueError(f"ef must be in (0, 100), got {ef}")
    return ed_area * (1.0 - ef / 100.0) ** (2.0 / 3.0)


def ef_from_areas(ed_area: float, es_area: float) -> float:
    """Volume-proxy ejection fraction from the two extreme areas."""
    return 100.0 * (1.0 - (es_area / ed_area) ** 1.5)


def _smooth_noise(rng: np.random.Generator, h: int, w: int, grid: int = 8, count: int = 1) -> np.ndarray:
    """Low-frequency texture fields [count, h, w]: coarse noise, bilinear-upsampled."""
    coarse = rng.standard_normal((count, grid, grid))
    ys = np.linspace(0, grid - 1, h)
    xs = np.linspace(0, grid - 1, w)
    y0 = np.clip(ys.astype(int), 0, grid - 2)
    x0 = np.clip(xs.astype(int), 0, grid - 2)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    c00 = coarse[:, y0][:, :, x0]
    c01 = coarse[:, y0][:, :, x0 + 1]
    c10 = coarse[:, y0 + 1][:, :, x0]
    c11 = coarse[:, y0 + 1][:, :, x0 + 1]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


def _render_video(rng: np.random.Generator, params: SynthParams, sequence_id: str) -> SyntheticSequence:
    h, w = params.height, params.width
    period = int(rng.integers(params.period_range[0], params.period_range[1] + 1))
    cycles = rng.uniform(*params.cycles_range)
    num_frames = int(round(period * cycles))
    ef_target = rng.uniform(*params.ef_range)

    cy = h * (0.5 + rng.uniform(-0.08, 0.08))
    cx = w * (0.5 + rng.uniform(-0.08, 0.08))
    ratio = rng.uniform(1.15, 1.5)  # vertical elongation
    ed_area = rng.uniform(*params.area_range) * h * w
    b0 = math.sqrt(ed_area / (math.pi * ratio))
    a0 = ratio * b0
    tilt = rng.uniform(-0.35, 0.35)
    phase0 = rng.uniform(0.0, 2.0 * math.pi)

    es_area = es_area_for_ef(ef_target, ed_area)
    t = np.arange(num_frames)
    area_t = es_area + (ed_area - es_area) * (0.5 + 0.5 * np.cos(2 * math.pi * t / period + phase0))
    scale_t = np.sqrt(area_t / ed_area)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = (xx - cx) * math.cos(tilt) + (yy - cy) * math.sin(tilt)
    v = -(xx - cx) * math.sin(tilt) + (yy - cy) * math.cos(tilt)
    # ellipse level-set per frame via broadcasting: [T, H, W]
    a_t = (a0 * scale_t)[:, None, None]
    b_t = (b0 * scale_t)[:, None, None]
    level = (u / b_t) ** 2 + (v / a_t) ** 2
    masks = level <= 1.0

    if params.edge_softness > 0:
        radius_t = np.sqrt(a_t * b_t)
        shape = 1.0 / (1.0 + np.exp(-(1.0 - level) * radius_t / params.edge_softness))
    else:
        shape = masks.astype(np.float64)

    # speckle-like texture redrawn every frame: decorrelated in time, it adds
    # the same expected distance at every temporal lag (so it cannot bias
    # cyclical matching) and leaves no static background to memorize
    background = 0.35 + params.texture * _smooth_noise(rng, h, w, count=num_frames)
    signal = background + 0.40 * shape

    for _ in range(params.distractors):
        amp = rng.uniform(0.10, 0.22)
        sigma = rng.uniform(3.0, 7.0)
        py, px = rng.uniform(0, h), rng.uniform(0, w)
        vy, vx = rng.uniform(-0.5, 0.5, size=2)
        by = (py + vy * t) % h
        bx = (px + vx * t) % w
        d2 = (yy[None] - by[:, None, None]) ** 2 + (xx[None] - bx[:, None, None]) ** 2
        signal = signal + amp * np.exp(-d2 / (2 * sigma**2))

    gains = np.array([1.0, 0.96, 0.92])
    jitter = 1.0 + 0.02 * rng.standard_normal(num_frames) if params.noise > 0 else np.ones(num_frames)
    video = signal[:, None] * gains[None, :, None, None] * jitter[:, None, None, None]
    if params.noise > 0:
        video = video + params.noise * rng.standard_normal(video.shape)
    frames = np.clip(np.round(video * 255.0), 0, 255).astype(np.uint8)

    areas = masks.reshape(num_frames, -1).sum(axis=1)
    ed_index = int(np.argmax(areas))
    es_index = int(np.argmin(areas))
    ef_label = ef_from_areas(float(areas[ed_index]), float(areas[es_index]))
    return SyntheticSequence(
        sequence_id=sequence_id,
        frames=frames,
        masks=masks,
        ef=ef_label,
        ed_index=ed_index,
        es_index=es_index,
        fps=params.fps,
    )


def generate_synthetic(
    count: int, params: SynthParams, seed: int, id_prefix: str = "synth", start_index: int = 0
) -> list[SyntheticSequence]:
    """Render `count` cyclical videos with full ground truth, deterministically."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    children = np.random.SeedSequence(seed).spawn(start_index + count)[start_index:]
    return [
        _render_video(np.random.default_rng(child), params, f"{id_prefix}{start_index + i:04d}")
        for i, child in enumerate(children)
    ]


def write_corpus(
    sequences: Iterable[tuple[SyntheticSequence, str]],
    root: Path | str,
    write_frame_masks: bool = True,
) -> None:
    """Write (sequence, split) pairs into the manifest layout and compute stats.

    Channel statistics are accumulated over the training split only.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    acc_sum = np.zeros(3)
    acc_sq = np.zeros(3)
    acc_n = 0
    with (root / MANIFEST_NAME).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for seq, split in sequences:
            writer.writerow(
                [
                    seq.sequence_id,
                    split,
                    seq.frames.shape[0],
                    seq.fps,
                    f"{seq.ef:.4f}",
                    seq.ed_index,
                    seq.es_index,
                ]
            )
            fdir = root / "frames" / seq.sequence_id
            mdir = root / "masks" / seq.sequence_id
            for tt in range(seq.frames.shape[0]):
                _save_png(seq.frames[tt], fdir / f"{tt:06d}.png")
                if write_frame_masks:
                    _save_png(seq.masks[tt].astype(np.uint8) * 255, mdir / f"{tt:06d}.png")
            _save_png(seq.masks[seq.ed_index].astype(np.uint8) * 255, mdir / "ed.png")
            _save_png(seq.masks[seq.es_index].astype(np.uint8) * 255, mdir / "es.png")
            if split == "train":
                x = seq.frames.astype(np.float64) / 255.0
                acc_sum += x.sum(axis=(0, 2, 3))
                acc_sq += (x**2).sum(axis=(0, 2, 3))
                acc_n += seq.frames.shape[0] * seq.frames.shape[2] * seq.frames.shape[3]
    if acc_n:
        mean = acc_sum / acc_n
        std = np.sqrt(np.maximum(acc_sq / acc_n - mean**2, 1e-12))
        Stats(mean=tuple(mean.tolist()), std=tuple(std.tolist())).save(root / STATS_NAME)
