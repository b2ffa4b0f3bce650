"""Differentiable cyclical-consistency loss over frame embedding sequences.

A clip that covers at least two heart cycles is split into three consecutive
index regions: a template region at the start, a longer search region in the
middle, and a small buffer at the end that absorbs the temporal offset. A
short run of embeddings (a "phase") sampled from the template region is
soft-matched against every candidate start in the search region; the match
probabilities are used to build a probability-weighted expectation of the
phase one offset later, which is then matched back into the template region.
If the features are cyclically consistent, the back-match peaks at the
template start shifted by the same offset, and the cross-entropy against that
index is the training signal.

Everything here is a pure function of its inputs and differentiable end to
end, so it can be dropped into any training loop and evaluated concurrently
across batch elements.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch


class NumericError(RuntimeError):
    """Raised when a similarity or probability turns out non-finite."""


@dataclass(frozen=True)
class RegionPartition:
    """Disjoint, ordered template / search / buffer index regions of a clip.

    All indices are 0-based. The template region must be strictly shorter
    than the search region, otherwise a full cycle can fit inside the
    template and the back-matching step becomes ambiguous.
    """

    template: range
    search: range
    buffer: range

    def __post_init__(self):
        for name in ("template", "search", "buffer"):
            r = getattr(self, name)
            if r.step != 1:
                raise ValueError(f"{name} region must be a step-1 range, got step {r.step}")
        if len(self.template) == 0 or len(self.search) == 0:
            raise ValueError("template and search regions must be non-empty")
        if not (self.template.stop <= self.search.start and self.search.stop <= self.buffer.start):
            raise ValueError(
                "regions must be disjoint and ordered template < search < buffer, got "
                f"template={self.template} search={self.search} buffer={self.buffer}"
            )
        if len(self.template) >= len(self.search):
            raise ValueError(
                f"template region ({len(self.template)} frames) must be shorter than "
                f"search region ({len(self.search)} frames) to keep back-matching unambiguous"
            )

    @classmethod
    def default_40(cls) -> "RegionPartition":
        """Standard split of a 40-frame clip: template 0-14, search 15-35, buffer 36-39."""
        return cls(template=range(0, 15), search=range(15, 36), buffer=range(36, 40))

    @property
    def clip_len(self) -> int:
        """Minimum clip length that covers all three regions."""
        return self.buffer.stop if len(self.buffer) else self.search.stop


@dataclass(frozen=True)
class CycleConfig:
    """Hyperparameters of the cyclical-consistency loss.

    phase_len: number of consecutive embeddings that make up one phase.
    offset: frame shift applied to both reference and matched time-points
        when checking that alignment persists.
    temperature: softmax sharpness multiplier on similarities.
    weight: weight of this loss when combined with a supervised loss.
    start_range: template start indices the reference phase may be drawn from.
    """

    phase_len: int = 3
    offset: int = 2
    temperature: float = 10.0
    weight: float = 0.01
    start_range: range = field(default_factory=lambda: range(0, 13))

    def __post_init__(self):
        if self.phase_len < 1:
            raise ValueError(f"phase_len must be >= 1, got {self.phase_len}")
        if self.offset < 1:
            raise ValueError(f"offset must be >= 1, got {self.offset}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if len(self.start_range) == 0:
            raise ValueError("start_range must be non-empty")

    def validate_against(self, partition: RegionPartition) -> None:
        """Check that this config is compatible with a region partition."""
        t = partition.template
        if self.start_range.start < t.start or self.start_range.stop > t.stop:
            raise ValueError(
                f"start_range {self.start_range} must lie inside the template region {t}"
            )
        if max(self.start_range) + self.phase_len - 1 > max(t):
            raise ValueError(
                f"a phase of length {self.phase_len} starting at {max(self.start_range)} "
                f"runs past the template region end {max(t)}"
            )
        last_needed = max(partition.search) + self.offset + self.phase_len - 1
        if last_needed > max(partition.buffer):
            raise ValueError(
                f"offset phases need frames up to index {last_needed} but the buffer "
                f"region ends at {max(partition.buffer)}; enlarge the buffer or shrink "
                "offset/phase_len"
            )


@dataclass
class EmbeddingSequence:
    """Per-frame feature vectors for one sampled clip, shape [T, d]."""

    values: torch.Tensor
    clip_indices: Sequence[int] | None = None

    def __post_init__(self):
        if self.values.dim() != 2:
            raise ValueError(f"embedding sequence must be 2-D [T, d], got {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise NumericError("embedding sequence contains non-finite values")
        if self.clip_indices is not None and len(self.clip_indices) != self.values.shape[0]:
            raise ValueError(
                f"clip_indices has {len(self.clip_indices)} entries for {self.values.shape[0]} frames"
            )

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass
class Phase:
    """A run of phase_len consecutive embeddings starting at `start`."""

    values: torch.Tensor  # [s, d]
    start: int


@dataclass
class SoftPhase:
    """A probability-weighted expectation of a phase; rows are convex mixes of frames."""

    values: torch.Tensor  # [s, d]


@dataclass
class MatchProfile:
    """Softmax match probabilities over a region's start indices."""

    weights: torch.Tensor  # [len(region)]
    region: range
    tag: str  # "template" | "search"

    def __post_init__(self):
        if self.weights.shape[0] != len(self.region):
            raise ValueError(
                f"profile has {self.weights.shape[0]} weights for region of size {len(self.region)}"
            )

    def weight_at(self, start: int) -> torch.Tensor:
        return self.weights[start - self.region.start]

    def argmax_start(self) -> int:
        return self.region.start + int(torch.argmax(self.weights).item())


def _seq_values(seq) -> torch.Tensor:
    if isinstance(seq, EmbeddingSequence):
        return seq.values
    if isinstance(seq, torch.Tensor):
        return seq
    raise TypeError(f"expected EmbeddingSequence or Tensor, got {type(seq).__name__}")


def _phase_values(p) -> torch.Tensor:
    if isinstance(p, (Phase, SoftPhase)):
        return p.values
    if isinstance(p, torch.Tensor):
        return p
    raise TypeError(f"expected Phase, SoftPhase or Tensor, got {type(p).__name__}")


def phase_embedding(seq, start: int, length: int) -> Phase:
    """Slice the `length` consecutive embeddings beginning at `start`."""
    values = _seq_values(seq)
    t_clip = values.shape[0]
    if start < 0:
        raise IndexError(f"phase start {start} violates start >= 0")
    if start + length - 1 >= t_clip:
        raise IndexError(
            f"phase [{start}, {start + length - 1}] violates start + length - 1 < clip length {t_clip}"
        )
    return Phase(values=values[start : start + length], start=start)


def phase_similarity(a, b) -> torch.Tensor:
    """Negative mean squared embedding distance between two equal-shape phases.

    Always <= 0, with equality exactly when the phases are identical. The
    accumulation runs in float64 regardless of the input dtype.
    """
    va, vb = _phase_values(a), _phase_values(b)
    if va.shape != vb.shape:
        raise ValueError(f"phase shapes differ: {tuple(va.shape)} vs {tuple(vb.shape)}")
    diff = (va - vb).to(torch.float64)
    return -diff.pow(2).mean()


def _region_phases(values: torch.Tensor, region: range, length: int) -> torch.Tensor:
    """Stack phases for every start in `region` -> [len(region), length, d]."""
    t_clip = values.shape[0]
    last = max(region) + length - 1
    if last >= t_clip:
        raise IndexError(
            f"phase starting at {max(region)} needs frame {last} but the clip ends at {t_clip - 1}; "
            "make sure the buffer region covers the overhang"
        )
    return torch.stack([values[q : q + length] for q in region])


def _similarity_profile(reference: torch.Tensor, phases: torch.Tensor) -> torch.Tensor:
    """Similarity of `reference` [s, d] against stacked `phases` [n, s, d], float64."""
    diff = (phases - reference.unsqueeze(0)).to(torch.float64)
    sims = -diff.pow(2).mean(dim=(1, 2))
    if not torch.isfinite(sims).all():
        raise NumericError("non-finite phase similarity; check the input embeddings")
    return sims


def match_probabilities(template, seq, region: range, temperature: float) -> MatchProfile:
    """Softmax match probabilities of a template phase over a search region."""
    if len(region) == 0:
        raise ValueError("cannot match against an empty region")
    values = _seq_values(seq)
    tmpl = _phase_values(template)
    phases = _region_phases(values, region, tmpl.shape[0])
    sims = _similarity_profile(tmpl, phases)
    weights = torch.softmax(sims * temperature, dim=0)
    return MatchProfile(weights=weights, region=region, tag="search")


def soft_offset_phase(seq, profile: MatchProfile, offset: int, length: int) -> SoftPhase:
    """Probability-weighted expectation of the matched phase, shifted by `offset`.

    Row theta of the output is sum_q w_q * z[q + offset + theta]. Every start
    in the profile's region must admit the shifted phase inside the clip; the
    trailing buffer region exists to make that true.
    """
    values = _seq_values(seq)
    t_clip = values.shape[0]
    region = profile.region
    if offset < 0:
        raise ValueError(f"offset must be >= 0, got {offset}")
    last = max(region) + offset + length - 1
    if last >= t_clip:
        raise IndexError(
            f"offset phase from start {max(region)} needs frame {last} but the clip ends at "
            f"{t_clip - 1}; the buffer region must absorb offset + phase overhang"
        )
    starts = torch.as_tensor(list(region), device=values.device)
    idx = starts.unsqueeze(1) + offset + torch.arange(length, device=values.device).unsqueeze(0)
    gathered = values[idx]  # [n, length, d]
    w = profile.weights.to(gathered.dtype).unsqueeze(1).unsqueeze(2)
    return SoftPhase(values=(w * gathered).sum(dim=0))


def template_match_probabilities(soft, seq, template_region: range, temperature: float) -> MatchProfile:
    """Softmax match probabilities of a (soft) phase swept over the template region.

    Phases that start late in the template region may run into the search
    region; those frames exist in the clip, so the sweep is legal.
    """
    if len(template_region) == 0:
        raise ValueError("cannot match against an empty region")
    values = _seq_values(seq)
    ref = _phase_values(soft)
    phases = _region_phases(values, template_region, ref.shape[0])
    sims = _similarity_profile(ref, phases)
    weights = torch.softmax(sims * temperature, dim=0)
    return MatchProfile(weights=weights, region=template_region, tag="template")


def _single_cycle_loss(
    values: torch.Tensor,
    partition: RegionPartition,
    config: CycleConfig,
    start: int,
) -> torch.Tensor:
    if start not in config.start_range:
        raise ValueError(f"template start {start} is outside the allowed range {config.start_range}")
    if values.shape[0] < partition.clip_len:
        raise ValueError(
            f"clip of {values.shape[0]} frames cannot cover the partition, which needs "
            f"{partition.clip_len}"
        )
    s, c, tau = config.phase_len, config.offset, config.temperature

    template = phase_embedding(values, start, s)
    alpha = match_probabilities(template, values, partition.search, tau)
    soft = soft_offset_phase(values, alpha, c, s)

    # Cross-entropy against the offset template start, via log-softmax for stability.
    phases = _region_phases(values, partition.template, s)
    sims = _similarity_profile(soft.values, phases)
    log_probs = torch.log_softmax(sims * tau, dim=0)
    target = start + c - partition.template.start
    return -log_probs[target]


def cycle_loss(sequences, partition: RegionPartition, config: CycleConfig, starts: Sequence[int]) -> torch.Tensor:
    """Mean cyclical-consistency cross-entropy over a batch of embedding sequences.

    `sequences` may be a single [T, d] tensor / EmbeddingSequence or an
    iterable of them; `starts` holds one template start per sequence, drawn
    from config.start_range. The result is differentiable with respect to
    every embedding and deterministic given inputs and starts.
    """
    config.validate_against(partition)
    if isinstance(sequences, (torch.Tensor, EmbeddingSequence)):
        sequences = [sequences]
    else:
        sequences = list(sequences)
    if len(sequences) != len(starts):
        raise ValueError(f"{len(sequences)} sequences but {len(starts)} template starts")
    if not sequences:
        raise ValueError("empty batch")
    losses = [
        _single_cycle_loss(_seq_values(seq), partition, config, int(p))
        for seq, p in zip(sequences, starts)
    ]
    return torch.stack(losses).mean()


def sample_template_starts(n: int, config: CycleConfig, rng: np.random.Generator) -> list[int]:
    """Draw one template start per sequence, uniform over config.start_range."""
    lo, hi = config.start_range.start, config.start_range.stop
    return [int(v) for v in rng.integers(lo, hi, size=n)]


def gradient_check(
    values: torch.Tensor,
    partition: RegionPartition,
    config: CycleConfig,
    start: int,
    epsilon: float = 1e-5,
    num_coords: int = 64,
    seed: int = 0,
) -> float:
    """Compare the autograd gradient of the loss against central finite differences.

    Perturbs `num_coords` randomly chosen embedding coordinates by +-epsilon
    and returns the maximum error relative to the largest finite-difference
    component (so coordinates whose true gradient is ~0 do not blow up the
    ratio). Run this in float64; float32 round-off swamps the comparison.
    """
    values = values.detach().to(torch.float64)
    rng = np.random.default_rng(seed)

    leaf = values.clone().requires_grad_(True)
    loss = cycle_loss(leaf, partition, config, [start])
    (grad,) = torch.autograd.grad(loss, leaf)

    t_clip, dim = values.shape
    n = min(num_coords, t_clip * dim)
    flat_choices = rng.choice(t_clip * dim, size=n, replace=False)

    fd = torch.zeros(n, dtype=torch.float64)
    for i, flat in enumerate(flat_choices):
        t, k = divmod(int(flat), dim)
        bumped = values.clone()
        bumped[t, k] += epsilon
        up = cycle_loss(bumped, partition, config, [start])
        bumped[t, k] -= 2 * epsilon
        down = cycle_loss(bumped, partition, config, [start])
        fd[i] = (up - down) / (2 * epsilon)

    auto = torch.stack([grad[divmod(int(f), dim)] for f in flat_choices])
    scale = max(float(fd.abs().max()), float(auto.abs().max()), 1e-12)
    return float((auto - fd).abs().max() / scale)
