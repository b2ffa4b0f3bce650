"""Shared fixtures: small synthetic corpora reused across training tests."""

import pytest
import torch

from cyclecho.data import SynthParams, generate_synthetic, load_manifest, write_corpus


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """8 train + 2 test videos at 32x32 with short cycles; labeled and cached."""
    root = tmp_path_factory.mktemp("tiny") / "ds"
    params = SynthParams(
        height=32,
        width=32,
        period_range=(12, 16),
        cycles_range=(2.2, 2.8),
        noise=0.03,
        distractors=1,
    )
    seqs = generate_synthetic(10, params, seed=42)
    write_corpus([(s, "train") for s in seqs[:8]] + [(s, "test") for s in seqs[8:]], root)
    return load_manifest(root)


@pytest.fixture(autouse=True)
def _fixed_torch_state():
    state = torch.get_rng_state()
    det = torch.are_deterministic_algorithms_enabled()
    yield
    torch.set_rng_state(state)
    torch.use_deterministic_algorithms(det)
