import numpy as np
import pytest
from scipy import ndimage

from conftest import numeric_grad
from roi_cae.exceptions import CalibrationError, EmptyMaskError, ShapeMismatchError
from roi_cae.losses import (
    ms_ssim,
    ms_ssim_scales,
    phase1_loss,
    phase2_components,
    phase2_total,
    roi_edge_loss,
    roi_l1,
    roi_mask,
    sobel_norm_magnitude,
)
from roi_cae.preprocess import RoiBox
from roi_cae.tensor import Tensor, backward, parameter

BOX = RoiBox(12.0, 8.0, 36.0, 24.0)


@pytest.fixture
def image():
    return np.random.default_rng(0).uniform(0.2, 0.8, (32, 48))


@pytest.fixture
def mask():
    return roi_mask(BOX, (48, 32))


def test_ms_ssim_of_identical_images_is_one(image):
    assert ms_ssim(image, image).item() == pytest.approx(1.0, abs=1e-12)
    assert phase1_loss(image, image).item() == pytest.approx(0.0, abs=1e-12)


def test_ms_ssim_drops_with_noise(image):
    noisy = np.clip(image + np.random.default_rng(1).normal(0, 0.2, image.shape), 0, 1)
    value = ms_ssim(image, noisy).item()
    assert 0.0 < value < 0.95


@pytest.mark.parametrize("seed", range(20))
def test_ms_ssim_falls_as_noise_grows(seed):
    rng = np.random.default_rng(seed)
    clean = rng.uniform(0.2, 0.8, (32, 48))
    noise = rng.normal(0.0, 1.0, clean.shape)
    mild = ms_ssim(clean, clean + 0.05 * noise).item()
    strong = ms_ssim(clean, clean + 0.1 * noise).item()
    assert 1.0 > mild > strong


@pytest.mark.parametrize("seed", range(20))
def test_ms_ssim_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.0, 1.0, (32, 48))
    b = np.clip(a + rng.normal(0.0, 0.1, a.shape), 0.0, 1.0)
    assert ms_ssim(a, b).item() == pytest.approx(ms_ssim(b, a).item(), abs=1e-12)


def test_scale_count_follows_image_size():
    assert ms_ssim_scales(32, 48) == 2
    assert ms_ssim_scales(112, 160) == 4
    assert ms_ssim_scales(176, 176) == 5
    with pytest.raises(ShapeMismatchError):
        ms_ssim_scales(8, 48)


def test_roi_mask_and_minimum_size(mask):
    assert mask.shape == (32, 48)
    assert mask.sum() == 24 * 16
    with pytest.raises(EmptyMaskError):
        roi_mask(RoiBox(0.0, 0.0, 1.0, 1.0), (48, 32))


def test_roi_l1_only_sees_the_roi(image, mask):
    shifted = image + 0.1
    assert roi_l1(image, shifted, mask).item() == pytest.approx(0.1)
    outside = np.where(mask, image, 1.0 - image)
    assert roi_l1(image, outside, mask).item() == pytest.approx(0.0)


def test_roi_l1_ignores_changes_outside_the_roi(image, mask):
    rng = np.random.default_rng(4)
    x_hat = np.clip(image + rng.normal(0.0, 0.05, image.shape), 0.0, 1.0)
    changed = np.where(mask, x_hat, rng.uniform(0.0, 1.0, image.shape))

    def value_and_grad(candidate):
        leaf = parameter(candidate[None, None].copy(), "x_hat")
        loss = roi_l1(image, leaf, mask)
        return loss.item(), backward(loss, {"x_hat": leaf})["x_hat"][0, 0]

    base_value, base_grad = value_and_grad(x_hat)
    new_value, new_grad = value_and_grad(changed)
    assert new_value == base_value
    np.testing.assert_array_equal(new_grad[mask], base_grad[mask])
    assert np.all(new_grad[~mask] == 0.0)


def test_sobel_peaks_on_a_step_edge():
    step = np.zeros((32, 48))
    step[:, 24:] = 1.0
    magnitude = sobel_norm_magnitude(step).data[0, 0]
    np.testing.assert_allclose(magnitude[:, 23:25], 1.0, rtol=1e-6)
    assert np.all(magnitude[:, :22] < 1e-12)
    assert np.all(magnitude[:, 26:] < 1e-12)


def test_normalized_sobel_is_scale_invariant(image):
    np.testing.assert_allclose(
        sobel_norm_magnitude(0.5 * image).data, sobel_norm_magnitude(image).data, atol=1e-6
    )


def test_edge_loss_zero_for_identical_images(image, mask):
    assert roi_edge_loss(image, image, mask).item() == pytest.approx(0.0, abs=1e-12)


def test_phase2_total_matches_weighted_components(image, mask):
    other = np.clip(image + np.random.default_rng(2).normal(0, 0.05, image.shape), 0, 1)
    parts = {k: v.item() for k, v in phase2_components(image, other, mask).items()}
    weights = {"glob": 0.2, "l1": 0.4, "edge": 0.4}
    expected = sum(weights[k] * parts[k] for k in weights)
    assert phase2_total(image, other, mask, weights).item() == pytest.approx(expected)
    only_global = phase2_total(image, other, mask, {"glob": 1.0})
    assert only_global.item() == pytest.approx(phase1_loss(image, other).item())


def test_phase2_rejects_bad_weights(image, mask):
    with pytest.raises(CalibrationError):
        phase2_total(image, image, mask, {"glob": 0.0, "l1": 0.0, "edge": 0.0})
    with pytest.raises(CalibrationError):
        phase2_total(image, image, mask, {"glob": 1.0, "l1": -0.5})


@pytest.mark.parametrize("term", ["glob", "l1", "edge"])
def test_loss_gradients_match_finite_differences(term):
    rng = np.random.default_rng(3)
    x = rng.uniform(0.2, 0.8, (1, 1, 32, 32))
    x_hat = np.clip(x + rng.normal(0.0, 0.05, x.shape), 0.0, 1.0)
    mask = roi_mask(RoiBox(6.0, 6.0, 26.0, 24.0), (32, 32))

    leaf = parameter(x_hat.copy(), "x_hat")
    grads = backward(phase2_components(x, leaf, mask, [term])[term], {"x_hat": leaf})

    def scalar(candidate):
        return phase2_components(x, Tensor(candidate), mask, [term])[term].item()

    expected = numeric_grad(scalar, x_hat.copy())
    np.testing.assert_allclose(grads["x_hat"], expected, atol=1e-6, rtol=1e-3)


def test_edge_loss_grows_with_blur(mask):
    sharp = np.full((32, 48), 0.3)
    sharp[12:20, 18:30] = 0.7
    light = ndimage.uniform_filter(sharp, size=3, mode="nearest")
    heavy = ndimage.uniform_filter(sharp, size=7, mode="nearest")
    light_loss = roi_edge_loss(sharp, light, mask).item()
    heavy_loss = roi_edge_loss(sharp, heavy, mask).item()
    assert 0.0 < light_loss < heavy_loss


def test_edge_loss_ignores_a_constant_offset(image, mask):
    assert roi_edge_loss(image, image + 0.1, mask).item() == pytest.approx(0.0, abs=1e-6)
