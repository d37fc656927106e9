import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roi_cae.exceptions import ProbeError
from roi_cae.metrics import (
    auroc,
    evaluate_sample,
    load_metrics_csv,
    psnr,
    rank_stats,
    roi_crop_bounds,
    save_metrics_csv,
    softmax_stats,
)
from roi_cae.preprocess import RoiBox


def test_psnr_known_values():
    x = np.zeros((8, 8))
    assert psnr(x, x + 0.1) == pytest.approx(20.0)
    assert psnr(x, x) == 100.0


def _brute_force_auroc(pos, neg):
    pairs = list(itertools.product(pos, neg))
    return sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in pairs) / len(pairs)


@settings(deadline=None, max_examples=50)
@given(
    pos=st.lists(st.integers(0, 6), min_size=1, max_size=15),
    neg=st.lists(st.integers(0, 6), min_size=1, max_size=15),
)
def test_auroc_matches_pairwise_count(pos, neg):
    assert auroc(pos, neg) == pytest.approx(_brute_force_auroc(pos, neg))


def test_auroc_extremes():
    assert auroc([3.0, 4.0], [1.0, 2.0]) == 1.0
    assert auroc([1.0, 2.0], [3.0, 4.0]) == 0.0
    with pytest.raises(ProbeError):
        auroc([], [1.0])


def test_rank_stats():
    r2, rho = rank_stats([1, 2, 3, 4], [1, 4, 9, 16])
    assert rho == pytest.approx(1.0)
    assert r2 < 1.0
    assert rank_stats([1, 2, 3], [1, 2, 3]) == pytest.approx((1.0, 1.0))
    _, rho = rank_stats([1, 2, 3], [5, 5, 5])
    assert rho == 0.0
    with pytest.raises(ProbeError):
        rank_stats([2, 2, 2], [1, 2, 3])
    with pytest.raises(ProbeError):
        rank_stats([1, 2], [1, 2])


def test_softmax_stats_uniform_logits():
    confidence, entropy = softmax_stats(np.zeros((2, 4)))
    np.testing.assert_allclose(confidence, 0.25)
    np.testing.assert_allclose(entropy, np.log(4.0))


def test_roi_crop_grows_to_minimum_side():
    r0, r1, c0, c1 = roi_crop_bounds(RoiBox(20.0, 10.0, 24.0, 14.0), 32, 48)
    assert r1 - r0 == 16 and c1 - c0 == 16
    assert r0 <= 10 and r1 >= 14 and c0 <= 20 and c1 >= 24
    r0, r1, c0, c1 = roi_crop_bounds(RoiBox(0.0, 0.0, 3.0, 3.0), 32, 48)
    assert (r0, c0) == (0, 0) and (r1, c1) == (16, 16)


def test_evaluate_sample_on_perfect_reconstruction(tmp_path):
    image = np.random.default_rng(0).uniform(0.2, 0.8, (32, 48))
    box = RoiBox(12.0, 8.0, 36.0, 24.0)
    record = evaluate_sample(image, image, box, "site_a-0000", "site_a", "val")
    assert record.psnr == 100.0
    assert record.ms_ssim == pytest.approx(1.0)
    assert record.roi_ms_ssim == pytest.approx(1.0)
    assert record.roi_mae == 0.0
    assert record.roi_edge_mae == pytest.approx(0.0, abs=1e-12)

    path = save_metrics_csv([record], tmp_path / "metrics_P1.csv")
    (loaded,) = load_metrics_csv(path)
    assert loaded.id == "site_a-0000" and loaded.split == "val"
    assert loaded.psnr == pytest.approx(100.0)
