import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roi_cae.exceptions import CanvasError, InvalidImageError, InvalidRoiError
from roi_cae.preprocess import (
    RoiBox,
    check_canvas,
    invert_roi,
    letterbox,
    letterbox_transform,
    remap_roi,
    validate_roi,
)


def test_canvas_must_be_divisible_by_16():
    assert check_canvas((160, 112)) == (160, 112)
    with pytest.raises(CanvasError):
        check_canvas((50, 32))
    with pytest.raises(CanvasError):
        check_canvas((8, 8))


def test_letterbox_pads_vertically_for_wide_images():
    raw = np.full((50, 100), 0.5)
    out, transform = letterbox(raw, (160, 112))
    assert out.shape == (112, 160)
    assert transform.scale == pytest.approx(1.6)
    assert transform.offset_x == pytest.approx(0.0)
    assert transform.offset_y == pytest.approx(16.0)
    np.testing.assert_allclose(out[16:96], 0.5)
    assert np.all(out[:16] == 0.0)
    assert np.all(out[96:] == 0.0)


def test_letterbox_rejects_bad_images():
    with pytest.raises(InvalidImageError):
        letterbox(np.full((20, 20), 1.5), (32, 32))
    with pytest.raises(InvalidImageError):
        letterbox(np.zeros((4, 20)), (32, 32))
    with pytest.raises(InvalidImageError):
        letterbox(np.zeros((20, 20, 3)), (32, 32))


@settings(deadline=None, max_examples=60)
@given(
    raw_w=st.integers(16, 400),
    raw_h=st.integers(16, 400),
    fx=st.tuples(st.floats(0.0, 0.6), st.floats(0.05, 0.4)),
    fy=st.tuples(st.floats(0.0, 0.6), st.floats(0.05, 0.4)),
)
def test_remap_then_invert_recovers_raw_box(raw_w, raw_h, fx, fy):
    box = RoiBox(
        fx[0] * raw_w,
        fy[0] * raw_h,
        (fx[0] + fx[1]) * raw_w,
        (fy[0] + fy[1]) * raw_h,
    )
    transform = letterbox_transform((raw_w, raw_h), (160, 112))
    back = invert_roi(remap_roi(box, transform), transform)
    np.testing.assert_allclose(back.as_list(), box.as_list(), atol=0.51)


def test_remap_clips_to_canvas():
    transform = letterbox_transform((100, 50), (160, 112))
    box = remap_roi(RoiBox(-10.0, -20.0, 120.0, 60.0), transform)
    assert box.x1 == 0.0 and box.y1 == 0.0
    assert box.x2 == 160.0 and box.y2 == 112.0


def test_validate_roi_two_pixel_rule():
    canvas = (160, 112)
    assert validate_roi(RoiBox(10.0, 10.0, 12.0, 12.0), canvas)
    assert not validate_roi(RoiBox(10.0, 10.0, 11.5, 30.0), canvas)
    assert not validate_roi(RoiBox(170.0, 10.0, 190.0, 30.0), canvas)
    # clipped to 1 px on the canvas edge
    assert not validate_roi(RoiBox(159.0, 10.0, 175.0, 30.0), canvas)


def test_roi_box_rejects_non_finite_and_short_sequences():
    with pytest.raises(InvalidRoiError):
        RoiBox(0.0, 0.0, float("nan"), 1.0)
    with pytest.raises(InvalidRoiError):
        RoiBox.from_sequence([0.0, 1.0, 2.0])
