"""Unit and property tests for the cyclical-consistency loss core."""

import math

import numpy as np
import pytest
import torch

from cyclecho.cycle import (
    CycleConfig,
    EmbeddingSequence,
    MatchProfile,
    NumericError,
    RegionPartition,
    cycle_loss,
    gradient_check,
    match_probabilities,
    phase_embedding,
    phase_similarity,
    sample_template_starts,
    soft_offset_phase,
    template_match_probabilities,
)

PARTITION = RegionPartition.default_40()
CONFIG = CycleConfig()


def periodic_embeddings(period, t_clip, dim, rng, dtype=torch.float64):
    """Tile one random cycle of `period` distinct frames to length t_clip."""
    cycle = rng.standard_normal((period, dim))
    reps = int(np.ceil(t_clip / period))
    return torch.as_tensor(np.tile(cycle, (reps, 1))[:t_clip], dtype=dtype)


# ---------------------------------------------------------------- phases


def test_phase_embedding_slices_rows():
    seq = torch.tensor([[1.0], [2.0], [3.0], [4.0]])
    p = phase_embedding(seq, 1, 2)
    assert torch.equal(p.values, torch.tensor([[2.0], [3.0]]))
    assert p.start == 1


def test_phase_embedding_single_row():
    seq = torch.tensor([[1.0], [2.0], [3.0], [4.0]])
    p = phase_embedding(seq, 0, 1)
    assert torch.equal(p.values, seq[0:1])


def test_phase_embedding_out_of_range():
    seq = torch.zeros(4, 1)
    with pytest.raises(IndexError, match="clip length 4"):
        phase_embedding(seq, 2, 3)


def test_similarity_identity_is_zero():
    p = phase_embedding(torch.randn(10, 5), 2, 3)
    assert phase_similarity(p, p).item() == 0.0


def test_similarity_hand_values():
    a = torch.tensor([[1.0, 0.0]])
    b = torch.tensor([[0.0, 2.0]])
    assert phase_similarity(a, b).item() == pytest.approx(-2.5, abs=1e-12)

    a = torch.tensor([[1.0], [2.0]])
    b = torch.tensor([[1.0], [4.0]])
    assert phase_similarity(a, b).item() == pytest.approx(-2.0, abs=1e-12)


def test_similarity_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        phase_similarity(torch.zeros(2, 3), torch.zeros(3, 3))


def test_similarity_nonpositive_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = torch.as_tensor(rng.standard_normal((3, 4)))
        b = torch.as_tensor(rng.standard_normal((3, 4)))
        assert phase_similarity(a, b).item() <= 0.0
        assert phase_similarity(a, a).item() == 0.0


# ---------------------------------------------------------------- matching


def test_match_probabilities_uniform_for_identical_phases():
    seq = torch.ones(10, 3)
    template = phase_embedding(seq, 0, 2)
    prof = match_probabilities(template, seq, range(4, 9), temperature=10.0)
    assert torch.allclose(prof.weights, torch.full((5,), 0.2, dtype=prof.weights.dtype))


def test_match_probabilities_hand_softmax():
    # seq values chosen so similarities against the template are [0, -1, -1]
    seq = torch.tensor([[0.0], [1.0], [1.0]])
    template = torch.tensor([[0.0]])
    prof = match_probabilities(template, seq, range(0, 3), temperature=1.0)
    expected = [0.5761, 0.2119, 0.2119]
    assert np.allclose(prof.weights.numpy(), expected, atol=1e-4)


def test_match_probabilities_sharp_temperature():
    seq = torch.tensor([[0.0], [1.0], [1.0]])
    template = torch.tensor([[0.0]])
    prof = match_probabilities(template, seq, range(0, 3), temperature=100.0)
    assert prof.weights[0].item() >= 1.0 - 1e-10


def test_match_probabilities_empty_region():
    with pytest.raises(ValueError, match="empty region"):
        match_probabilities(torch.zeros(1, 1), torch.zeros(5, 1), range(2, 2), 1.0)


def test_match_probabilities_sum_to_one_random():
    rng = np.random.default_rng(1)
    for _ in range(30):
        seq = torch.as_tensor(rng.standard_normal((20, 6)))
        template = phase_embedding(seq, 1, 3)
        prof = match_probabilities(template, seq, range(5, 17), temperature=7.5)
        assert abs(prof.weights.sum().item() - 1.0) < 1e-6
        assert (prof.weights >= 0).all()


def test_non_finite_embeddings_rejected():
    bad = torch.zeros(5, 2)
    bad[3, 0] = float("nan")
    with pytest.raises(NumericError):
        match_probabilities(torch.zeros(1, 2), bad, range(2, 5), 1.0)


# ---------------------------------------------------------------- soft phase


def test_soft_offset_phase_one_hot_degenerates_to_slice():
    rng = np.random.default_rng(2)
    seq = torch.as_tensor(rng.standard_normal((20, 4)))
    weights = torch.zeros(5, dtype=torch.float64)
    weights[2] = 1.0
    prof = MatchProfile(weights=weights, region=range(6, 11), tag="search")
    soft = soft_offset_phase(seq, prof, offset=3, length=2)
    expected = phase_embedding(seq, 8 + 3, 2).values
    assert torch.allclose(soft.values, expected)


def test_soft_offset_phase_weighted_average():
    seq = torch.tensor([[2.0], [4.0]])
    prof = MatchProfile(weights=torch.tensor([0.5, 0.5]), region=range(0, 2), tag="search")
    soft = soft_offset_phase(seq, prof, offset=0, length=1)
    assert soft.values.item() == pytest.approx(3.0)


def test_soft_offset_phase_uniform_over_periodic_copies():
    rng = np.random.default_rng(3)
    seq = periodic_embeddings(5, 20, 3, rng)
    # starts 2 and 7 are exact copies one period apart
    prof = MatchProfile(
        weights=torch.tensor([0.5, 0.0, 0.0, 0.0, 0.0, 0.5], dtype=torch.float64),
        region=range(2, 8),
        tag="search",
    )
    soft = soft_offset_phase(seq, prof, offset=1, length=2)
    assert torch.allclose(soft.values, phase_embedding(seq, 3, 2).values)


def test_soft_offset_phase_overhang_raises():
    seq = torch.zeros(10, 1)
    prof = MatchProfile(weights=torch.ones(3) / 3, region=range(5, 8), tag="search")
    with pytest.raises(IndexError, match="buffer"):
        soft_offset_phase(seq, prof, offset=2, length=2)


# ---------------------------------------------------------------- template match


def test_template_match_sharp_peak():
    rng = np.random.default_rng(4)
    seq = torch.as_tensor(rng.standard_normal((40, 8)))
    soft = phase_embedding(seq, 5, 3)  # exactly the phase at start 5
    prof = template_match_probabilities(soft, seq, PARTITION.template, temperature=100.0)
    assert prof.weight_at(5).item() >= 1.0 - 1e-6
    assert prof.argmax_start() == 5


def test_template_match_uniform_for_constant_input():
    seq = torch.ones(40, 4)
    soft = phase_embedding(seq, 0, 3)
    prof = template_match_probabilities(soft, seq, PARTITION.template, temperature=10.0)
    assert torch.allclose(prof.weights, torch.full((15,), 1 / 15, dtype=prof.weights.dtype))


def test_template_match_sums_to_one():
    rng = np.random.default_rng(5)
    seq = torch.as_tensor(rng.standard_normal((40, 8)))
    soft = phase_embedding(seq, 20, 3)
    prof = template_match_probabilities(soft, seq, PARTITION.template, temperature=3.3)
    assert abs(prof.weights.sum().item() - 1.0) < 1e-6


# ---------------------------------------------------------------- partitions and config


def test_partition_rejects_overlap():
    with pytest.raises(ValueError, match="disjoint"):
        RegionPartition(range(0, 16), range(15, 36), range(36, 40))


def test_partition_rejects_template_not_shorter():
    with pytest.raises(ValueError, match="shorter"):
        RegionPartition(range(0, 18), range(18, 36), range(36, 40))


def test_config_start_range_must_fit_template():
    cfg = CycleConfig(start_range=range(0, 14))  # start 13 + phase 3 ends at 15 > 14
    with pytest.raises(ValueError, match="template region"):
        cfg.validate_against(PARTITION)


def test_config_buffer_must_absorb_overhang():
    cfg = CycleConfig(offset=4)  # 35 + 4 + 2 = 41 > 39
    with pytest.raises(ValueError, match="buffer"):
        cfg.validate_against(PARTITION)


def test_default_partition_matches_standard_clip():
    assert list(PARTITION.template) == list(range(0, 15))
    assert list(PARTITION.search) == list(range(15, 36))
    assert list(PARTITION.buffer) == list(range(36, 40))
    CONFIG.validate_against(PARTITION)
    assert CONFIG.start_range == range(0, 13)


# ---------------------------------------------------------------- loss values


def test_loss_constant_embeddings_is_log_template_size():
    seq = torch.ones(40, 8, dtype=torch.float64)
    loss = cycle_loss(seq, PARTITION, CONFIG, [4])
    assert loss.item() == pytest.approx(math.log(15), abs=1e-6)


def test_loss_periodic_unique_match():
    rng = np.random.default_rng(6)
    cfg = CycleConfig(temperature=100.0)
    seq = periodic_embeddings(21, 40, 8, rng)
    start = int(rng.integers(0, 13))
    loss = cycle_loss(seq, PARTITION, cfg, [start])
    assert loss.item() < 1e-3

    soft = soft_offset_phase(
        seq,
        match_probabilities(phase_embedding(seq, start, 3), seq, PARTITION.search, 100.0),
        offset=2,
        length=3,
    )
    beta = template_match_probabilities(soft, seq, PARTITION.template, 100.0)
    assert beta.argmax_start() == start + 2


def test_loss_two_matches_in_search_region():
    # period 15 puts exact copies of the template at start+15 and start+30,
    # both inside the search region, for starts 0..5
    rng = np.random.default_rng(7)
    cfg = CycleConfig(temperature=100.0)
    for trial in range(20):
        seq = periodic_embeddings(15, 40, 8, np.random.default_rng(100 + trial))
        start = int(rng.integers(0, 6))
        alpha = match_probabilities(phase_embedding(seq, start, 3), seq, PARTITION.search, 100.0)
        w1 = alpha.weight_at(start + 15).item()
        w2 = alpha.weight_at(start + 30).item()
        assert abs(w1 - 0.5) < 1e-3 and abs(w2 - 0.5) < 1e-3
        soft = soft_offset_phase(seq, alpha, offset=2, length=3)
        beta = template_match_probabilities(soft, seq, PARTITION.template, 100.0)
        assert beta.argmax_start() == start + 2
        loss = cycle_loss(seq, PARTITION, cfg, [start])
        assert loss.item() < 1e-3


def test_loss_rejects_start_outside_range():
    seq = torch.randn(40, 4)
    with pytest.raises(ValueError, match="outside the allowed range"):
        cycle_loss(seq, PARTITION, CONFIG, [13])


def test_loss_rejects_short_clip():
    with pytest.raises(ValueError, match="cannot cover the partition"):
        cycle_loss(torch.randn(39, 4), PARTITION, CONFIG, [0])


def test_loss_rejects_batch_length_mismatch():
    with pytest.raises(ValueError, match="template starts"):
        cycle_loss([torch.randn(40, 4)], PARTITION, CONFIG, [0, 1])


def test_loss_batch_mean():
    rng = np.random.default_rng(8)
    seqs = [torch.as_tensor(rng.standard_normal((40, 6))) for _ in range(3)]
    starts = [0, 5, 12]
    per = [cycle_loss(s, PARTITION, CONFIG, [p]).item() for s, p in zip(seqs, starts)]
    batch = cycle_loss(seqs, PARTITION, CONFIG, starts).item()
    assert batch == pytest.approx(np.mean(per), rel=1e-12)


def test_loss_not_invariant_to_frame_shuffle():
    rng = np.random.default_rng(9)
    seq = periodic_embeddings(21, 40, 8, rng)
    base = cycle_loss(seq, PARTITION, CONFIG, [3]).item()
    shuffled = seq.clone()
    perm = np.random.default_rng(10).permutation(np.arange(15, 36))
    shuffled[15:36] = seq[perm]
    after = cycle_loss(shuffled, PARTITION, CONFIG, [3]).item()
    assert abs(base - after) > 1e-6


def test_loss_scale_temperature_covariance():
    rng = np.random.default_rng(11)
    seq = torch.as_tensor(rng.standard_normal((40, 8)))
    for lam in (0.5, 2.0, 10.0):
        a = cycle_loss(seq * lam, PARTITION, CycleConfig(temperature=10.0), [4]).item()
        b = cycle_loss(seq, PARTITION, CycleConfig(temperature=10.0 * lam**2), [4]).item()
        assert abs(a - b) <= 1e-9 * max(abs(a), abs(b))


def test_cyclicality_many_trials():
    cfg = CycleConfig(temperature=100.0)
    hits = 0
    trials = 100
    for trial in range(trials):
        rng = np.random.default_rng(1000 + trial)
        seq = periodic_embeddings(21, 40, 8, rng)
        start = int(rng.integers(0, 13))
        alpha = match_probabilities(phase_embedding(seq, start, 3), seq, PARTITION.search, 100.0)
        soft = soft_offset_phase(seq, alpha, offset=2, length=3)
        beta = template_match_probabilities(soft, seq, PARTITION.template, 100.0)
        hits += beta.argmax_start() == start + 2
    assert hits == trials


def test_embedding_sequence_validation():
    with pytest.raises(ValueError, match="2-D"):
        EmbeddingSequence(values=torch.zeros(4))
    with pytest.raises(NumericError):
        EmbeddingSequence(values=torch.tensor([[float("inf")], [0.0]]))
    seq = EmbeddingSequence(values=torch.zeros(40, 4), clip_indices=list(range(40)))
    assert len(seq) == 40
    assert cycle_loss(seq, PARTITION, CONFIG, [0]).item() == pytest.approx(math.log(15), abs=1e-6)


# ---------------------------------------------------------------- gradients


def test_gradient_check_random_sequence():
    rng = np.random.default_rng(12)
    seq = torch.as_tensor(rng.standard_normal((40, 8)))
    err = gradient_check(seq, PARTITION, CONFIG, start=5, epsilon=1e-5, num_coords=64, seed=0)
    assert err < 1e-4


def test_gradient_check_sharp_temperature():
    rng = np.random.default_rng(13)
    seq = periodic_embeddings(21, 40, 8, rng)
    seq = seq + 0.01 * torch.as_tensor(rng.standard_normal(seq.shape))
    cfg = CycleConfig(temperature=100.0)
    err = gradient_check(seq, PARTITION, cfg, start=2, epsilon=1e-6, num_coords=64, seed=1)
    assert err < 1e-4


def test_gradient_vanishes_on_constant_input():
    seq = torch.ones(40, 8, dtype=torch.float64, requires_grad=True)
    loss = cycle_loss(seq, PARTITION, CONFIG, [4])
    (grad,) = torch.autograd.grad(loss, seq)
    assert grad.abs().max().item() < 1e-10


def test_sample_template_starts_in_range():
    rng = np.random.default_rng(14)
    starts = sample_template_starts(500, CONFIG, rng)
    assert min(starts) >= 0 and max(starts) <= 12
    assert set(starts) == set(range(13))  # all values hit with 500 draws
