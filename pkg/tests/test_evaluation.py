"""Tests for metrics, saliency, similarity matrices, and report writing."""

import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from cyclecho.evaluation import (
    MetricReport,
    frame_similarity_matrix,
    mae,
    r_squared,
    saliency_overlay,
    sample_unlabeled_eval_frames,
    smoothgrad,
    top_gradient_dice,
    write_metric_report,
    write_predictions,
)
from cyclecho.segmentation import dice


# ---------------------------------------------------------------- mae / r2


def test_mae_values():
    assert mae([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mae([50.0, 60.0], [55.0, 65.0]) == 5.0


def test_mae_pair_permutation_invariance():
    rng = np.random.default_rng(0)
    preds = rng.random(30)
    labels = rng.random(30)
    perm = rng.permutation(30)
    assert mae(preds, labels) == pytest.approx(mae(preds[perm], labels[perm]), abs=1e-15)


def test_mae_empty_rejected():
    with pytest.raises(ValueError, match="empty"):
        mae([], [])


def test_r_squared_values():
    assert r_squared([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0
    labels = np.array([1.0, 2.0, 3.0])
    assert r_squared(np.full(3, labels.mean()), labels) == 0.0
    assert r_squared([1.0, 2.0, 4.0], [1.0, 2.0, 3.0]) == pytest.approx(0.5)


def test_r_squared_constant_labels_rejected():
    with pytest.raises(ValueError, match="constant"):
        r_squared([1.0, 2.0], [3.0, 3.0])


def test_r_squared_affine_invariance():
    rng = np.random.default_rng(1)
    preds = rng.random(20)
    labels = rng.random(20)
    base = r_squared(preds, labels)
    assert r_squared(3.0 * preds - 7.0, 3.0 * labels - 7.0) == pytest.approx(base, abs=1e-12)


# ---------------------------------------------------------------- smoothgrad


class TinyClipModel(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.Conv3d(3, 4, 3, padding=1)

    def forward(self, x):
        return torch.tanh(self.conv(x)).mean(dim=(1, 2, 3, 4))


def test_smoothgrad_zero_sigma_is_plain_gradient():
    torch.manual_seed(0)
    model = TinyClipModel()
    clip = torch.rand(3, 4, 8, 8)
    sal = smoothgrad(model, clip, n_samples=1, sigma=0.0, seed=0)
    x = clip.clone().requires_grad_(True)
    model(x.unsqueeze(0)).sum().backward()
    manual = x.grad.abs().mean(dim=0).numpy()
    assert np.allclose(sal, manual, atol=1e-7)
    assert (sal >= 0).all()


def test_smoothgrad_constant_model_is_zero():
    class ConstModel(nn.Module):
        def forward(self, x):
            return x.new_ones(x.shape[0]) * 5.0

    sal = smoothgrad(ConstModel(), torch.rand(3, 4, 8, 8), n_samples=3, sigma=0.1, seed=0)
    assert np.all(sal == 0.0)


def test_smoothgrad_seeded_determinism():
    torch.manual_seed(1)
    model = TinyClipModel()
    clip = torch.rand(3, 4, 8, 8)
    a = smoothgrad(model, clip, n_samples=5, sigma=0.1, seed=7)
    b = smoothgrad(model, clip, n_samples=5, sigma=0.1, seed=7)
    c = smoothgrad(model, clip, n_samples=5, sigma=0.1, seed=8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


# ---------------------------------------------------------------- top-k dice


def test_top_gradient_dice_mass_inside_large_mask():
    h = w = 20
    mask = np.zeros((h, w), dtype=bool)
    mask[4:14, 4:14] = True  # 100 pixels = 25% of the frame
    rng = np.random.default_rng(2)
    saliency = np.zeros((h, w))
    saliency[mask] = 1.0 + rng.random(int(mask.sum()))
    m = math.ceil(0.05 * h * w)
    expected = 2 * m / (m + int(mask.sum()))
    assert top_gradient_dice(saliency, mask) == pytest.approx(expected)


def test_top_gradient_dice_uniform_baseline():
    mask = np.zeros((10, 10), dtype=bool)
    mask[:3] = True
    score = top_gradient_dice(np.ones((10, 10)), mask)
    assert 0.0 <= score <= 1.0


def test_top_gradient_dice_k_bounds():
    with pytest.raises(ValueError, match="k"):
        top_gradient_dice(np.ones((4, 4)), np.zeros((4, 4), dtype=bool), k=0.0)
    with pytest.raises(ValueError, match="k"):
        top_gradient_dice(np.ones((4, 4)), np.zeros((4, 4), dtype=bool), k=1.0)


def test_top_gradient_dice_monotone_rescale_invariance():
    rng = np.random.default_rng(3)
    saliency = rng.random((16, 16))
    mask = rng.random((16, 16)) > 0.7
    base = top_gradient_dice(saliency, mask, k=0.05)
    assert top_gradient_dice(np.exp(saliency), mask, k=0.05) == base
    assert top_gradient_dice(saliency**3, mask, k=0.05) == base


def test_top_gradient_dice_tie_break_is_scan_order():
    saliency = np.ones((4, 4))
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 0] = True
    # ceil(0.05*16) = 1 pixel kept; ties resolve to the first scan-order pixel
    assert top_gradient_dice(saliency, mask) == 1.0


# ---------------------------------------------------------------- similarity matrix


def test_similarity_matrix_constant_video():
    frames = np.ones((6, 3, 4, 4))
    assert np.all(frame_similarity_matrix(frames) == 0.0)


def test_similarity_matrix_symmetric_zero_diagonal():
    rng = np.random.default_rng(4)
    frames = rng.random((10, 3, 5, 5))
    m = frame_similarity_matrix(frames)
    assert np.allclose(m, m.T)
    assert np.all(np.diag(m) == 0.0)
    assert m.max() == pytest.approx(1.0)


def test_similarity_matrix_periodic_stripes():
    rng = np.random.default_rng(5)
    period = 7
    cycle = rng.random((period, 2, 6, 6))
    frames = np.tile(cycle, (3, 1, 1, 1))[:20]
    m = frame_similarity_matrix(frames)
    for a in range(20 - period):
        assert m[a, a + period] == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------- reports


def test_metric_report_validation_and_writing(tmp_path):
    report = MetricReport(mae=4.9, r2=0.71, dice_ed=0.89, dice_es=0.92, dice_unlabeled=0.919, n=30, seed=0)
    write_metric_report(report, tmp_path / "report.csv", tmp_path / "report.txt")
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert lines[0] == "mae,r2,dice_ed,dice_es,dice_unlabeled,n,seed"
    assert "EF MAE" in (tmp_path / "report.txt").read_text()
    with pytest.raises(ValueError, match="r2"):
        MetricReport(mae=1.0, r2=1.5, dice_ed=0.5, dice_es=0.5, dice_unlabeled=0.5, n=1, seed=0)


def test_write_predictions_schema(tmp_path):
    write_predictions([("seq0", 55.1, 54.0, "student")], tmp_path / "preds.csv")
    lines = (tmp_path / "preds.csv").read_text().splitlines()
    assert lines[0] == "id,prediction,label,source"
    assert lines[1].startswith("seq0,55.1,54.0,student")


def test_unlabeled_eval_frames_avoid_labels(tiny_corpus):
    ids = tiny_corpus.ids("train")
    chosen = sample_unlabeled_eval_frames(tiny_corpus, ids, seed=0)
    for sid, t in chosen.items():
        info = tiny_corpus.info(sid)
        assert t not in (info.ed_index, info.es_index)
        assert 0 <= t < info.num_frames
    again = sample_unlabeled_eval_frames(tiny_corpus, ids, seed=0)
    assert chosen == again


def test_saliency_overlay_shape(tiny_corpus):
    frame = tiny_corpus.frames(tiny_corpus.ids("train")[0])[0]
    sal = np.random.default_rng(0).random(frame.shape[1:])
    overlay = saliency_overlay(frame, sal)
    assert overlay.shape == (32, 32, 3) and overlay.dtype == np.uint8


def test_export_embeddings_roundtrip(tiny_corpus, tmp_path):
    from cyclecho.evaluation import export_embeddings
    from cyclecho.models import build_segmentation_model

    torch.manual_seed(0)
    model = build_segmentation_model("small")
    ids = tiny_corpus.ids("train")[:2]
    path = tmp_path / "features.npz"
    export_embeddings(model, tiny_corpus, ids, path)
    stored = np.load(path)
    assert set(stored.files) == set(ids)
    assert stored[ids[0]].shape == (40, model.embed_dim)


# ------------------------------------------------- brute-force oracle spot checks


def brute_mae(preds, labels):
    total = 0.0
    for p, l in zip(preds, labels):
        total += abs(p - l)
    return total / len(preds)


def brute_r2(preds, labels):
    mean = sum(labels) / len(labels)
    ss_tot = sum((l - mean) ** 2 for l in labels)
    ss_res = sum((p - l) ** 2 for p, l in zip(preds, labels))
    return 1 - ss_res / ss_tot


def brute_dice(a, b):
    inter = sum(1 for x, y in zip(a.flat, b.flat) if x and y)
    size = int(np.sum(a)) + int(np.sum(b))
    return 1.0 if size == 0 else 2 * inter / size


def test_metrics_match_brute_force_spot():
    rng = np.random.default_rng(6)
    for _ in range(25):
        n = int(rng.integers(2, 40))
        preds = rng.random(n) * 100
        labels = rng.random(n) * 100
        assert mae(preds, labels) == pytest.approx(brute_mae(preds, labels), abs=1e-9)
        assert r_squared(preds, labels) == pytest.approx(brute_r2(preds, labels), abs=1e-9)
        a = rng.random((8, 8)) > 0.5
        b = rng.random((8, 8)) > 0.5
        assert dice(a, b) == pytest.approx(brute_dice(a, b), abs=1e-12)
