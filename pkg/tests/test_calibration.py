import logging

import pytest

from roi_cae.calibration import (
    CalibrationReport,
    LossWeights,
    balance_residual,
    calibrate_weights,
    weights_from_norms,
)
from roi_cae.exceptions import CalibrationError
from roi_cae.model import Checkpoint, ConvAutoencoder

NORMS = {"glob": 2.0, "l1": 1.0, "edge": 1.0}


def test_inverse_norm_weights():
    weights = weights_from_norms(NORMS)
    assert weights.as_dict() == pytest.approx({"glob": 0.2, "l1": 0.4, "edge": 0.4})
    assert balance_residual(NORMS, weights) == pytest.approx(0.0)


def test_pinned_global_weight():
    weights = weights_from_norms(NORMS, pin_global=True)
    assert weights.as_dict() == pytest.approx({"glob": 1.0, "l1": 2.0, "edge": 2.0})


def test_disabled_terms_get_zero_weight():
    weights = weights_from_norms(NORMS, enabled_terms=("glob", "l1"))
    assert weights.edge == 0.0
    assert weights.glob == pytest.approx(1.0 / 3.0)
    assert weights.l1 == pytest.approx(2.0 / 3.0)


def test_zero_norm_term_is_dropped_with_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="roi_cae.calibration"):
        weights = weights_from_norms({"glob": 1.0, "l1": 0.0, "edge": 1.0})
    assert weights.l1 == 0.0
    assert weights.glob == pytest.approx(0.5)
    assert "zero gradient norm" in caplog.text


def test_degenerate_norms_raise():
    with pytest.raises(CalibrationError):
        weights_from_norms({"glob": 0.0, "l1": 0.0, "edge": 0.0})
    with pytest.raises(CalibrationError):
        weights_from_norms({"glob": -1.0, "l1": 1.0, "edge": 1.0})


def test_calibration_needs_phase1_and_enough_samples(tiny_config, samples):
    model = ConvAutoencoder.initialize(tiny_config, 0)
    with pytest.raises(CalibrationError):
        calibrate_weights(Checkpoint.from_model(model, "P2"), samples[:4])
    with pytest.raises(CalibrationError):
        calibrate_weights(Checkpoint.from_model(model, "P1"), samples[:3])


def test_calibrated_weights_balance_gradient_norms(tmp_path, tiny_config, samples):
    checkpoint = Checkpoint.from_model(ConvAutoencoder.initialize(tiny_config, 0), "P1")
    report = calibrate_weights(checkpoint, samples[:4])
    weights = report.weights.as_dict()
    assert sum(weights.values()) == pytest.approx(1.0)
    assert all(value > 0 for value in weights.values())
    assert all(norm > 0 for norm in report.norms.values())
    assert report.balance_residual == pytest.approx(0.0, abs=1e-9)
    assert report.batch_ids == [sample.sample_id for sample in samples[:4]]

    path = report.save(tmp_path / "calibration.json")
    loaded = CalibrationReport.load(path)
    assert loaded.weights.as_dict() == pytest.approx(report.weights.as_dict())
    assert loaded.enabled_terms == ("glob", "l1", "edge")


def test_loss_weights_defaults_to_global_only():
    assert LossWeights().as_dict() == {"glob": 1.0, "l1": 0.0, "edge": 0.0}
