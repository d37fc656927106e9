import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roi_cae.calibration import LossWeights
from roi_cae.exceptions import ConfigValidationError, NonFiniteError, SplitError
from roi_cae.model import ConvAutoencoder
from roi_cae.trainer import (
    EarlyStopState,
    TrainConfig,
    early_stop_update,
    save_trace_csv,
    train_phase,
)


def _replay(losses, patience, min_delta=0.0):
    """Feed a scripted validation trace; returns (stop_epoch or None, best_epoch)."""
    state = EarlyStopState()
    for loss in losses:
        state, stop = early_stop_update(state, loss, patience, min_delta)
        if stop:
            return state.epoch, state.best_epoch
    return None, state.best_epoch


@pytest.mark.parametrize(
    "losses, patience, min_delta, expected",
    [
        ([1.0, 0.5, 0.6, 0.6, 0.55, 0.7, 0.8], 5, 0.0, (7, 2)),
        ([1.0, 0.9, 0.8, 0.7, 0.6, 0.5], 2, 0.0, (None, 6)),
        ([1.0, 1.0, 1.0], 2, 0.0, (3, 1)),
        ([1.0, 2.0], 1, 0.0, (2, 1)),
        ([1.0, 0.9, 0.95], 1, 0.1, (2, 1)),
        ([1.0, 0.8999, 0.85, 0.84], 2, 0.1, (4, 2)),
        ([0.5, 0.4, 0.45, 0.3, 0.35, 0.36, 0.37], 3, 0.0, (7, 4)),
        ([3.0, 2.0, 1.0, 1.5, 0.5, 0.6], 5, 0.0, (None, 5)),
        ([1.0, 0.99999, 0.999985], 2, 2e-5, (3, 1)),
        ([2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5], 5, 0.0, (7, 2)),
    ],
)
def test_scripted_traces(losses, patience, min_delta, expected):
    assert _replay(losses, patience, min_delta) == expected


@settings(deadline=None, max_examples=100)
@given(
    losses=st.lists(st.floats(0.0, 10.0), min_size=1, max_size=40),
    patience=st.integers(1, 8),
)
def test_stop_happens_exactly_patience_epochs_after_best(losses, patience):
    stop_epoch, best_epoch = _replay(losses, patience)
    if stop_epoch is None:
        assert len(losses) - best_epoch < patience
    else:
        assert stop_epoch - best_epoch == patience
        assert losses[best_epoch - 1] == min(losses[:stop_epoch])


def test_non_finite_validation_loss():
    with pytest.raises(NonFiniteError):
        early_stop_update(EarlyStopState(), float("nan"), 5, 0.0)


def test_train_config_validation():
    with pytest.raises(ConfigValidationError):
        TrainConfig(patience_p1=0)
    with pytest.raises(ConfigValidationError):
        TrainConfig(enabled_terms=("glob", "ssim"))
    with pytest.raises(ConfigValidationError):
        TrainConfig().phase_settings("P3")
    assert TrainConfig().phase_settings("P2").patience == 7


def test_phase1_training_returns_best_checkpoint(tiny_config, tiny_train_config, samples):
    train, val = samples[:12], samples[20:24]
    model = ConvAutoencoder.initialize(tiny_config, 3)
    result = train_phase(model, train, val, "P1", tiny_train_config, seed=3)
    assert [row.epoch for row in result.trace] == [1, 2]
    assert all(np.isfinite(row.val_loss) for row in result.trace)
    assert result.best_epoch in (1, 2)
    best = result.trace[result.best_epoch - 1]
    assert best.val_loss <= result.trace[0].val_loss
    assert result.checkpoint.phase == "P1"
    assert result.checkpoint.metadata["seed"] == 3
    assert not result.stopped_early
    assert any(
        not np.array_equal(result.checkpoint.params[name], model.params[name])
        for name in model.params
    )


def test_fixed_horizon_phase2_keeps_last_epoch(tmp_path, tiny_config, tiny_train_config, samples):
    train, val = samples[:8], samples[20:24]
    model = ConvAutoencoder.initialize(tiny_config, 4)
    weights = LossWeights(glob=0.5, l1=0.25, edge=0.25)
    result = train_phase(
        model, train, val, "P2", tiny_train_config, seed=4, weights=weights, fixed_horizon=1
    )
    assert result.best_epoch == 1
    assert len(result.trace) == 1
    assert result.weights == weights
    assert result.checkpoint.metadata["loss_weights"] == weights.as_dict()

    path = save_trace_csv(result.trace, tmp_path / "trace_P2.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["epoch", "train_loss", "val_loss", "stopped_flag"]
    assert frame["stopped_flag"].tolist() == [0]


def test_phase2_calibrates_when_no_weights_given(tiny_config, tiny_train_config, samples):
    model = ConvAutoencoder.initialize(tiny_config, 5)
    result = train_phase(
        model, samples[:4], samples[20:24], "P2", tiny_train_config, seed=5, fixed_horizon=1
    )
    assert result.calibration is not None
    assert result.weights == result.calibration.weights


def test_empty_splits_are_rejected(tiny_config, tiny_train_config, samples):
    model = ConvAutoencoder.initialize(tiny_config, 0)
    with pytest.raises(SplitError):
        train_phase(model, [], samples[:4], "P1", tiny_train_config, seed=0)
    with pytest.raises(SplitError):
        train_phase(model, samples[:4], [], "P1", tiny_train_config, seed=0)


@pytest.mark.slow
def test_training_is_deterministic(tiny_config, tiny_train_config, samples):
    runs = [
        train_phase(
            ConvAutoencoder.initialize(tiny_config, 6),
            samples[:8],
            samples[20:24],
            "P1",
            tiny_train_config,
            seed=6,
        )
        for _ in range(2)
    ]
    assert runs[0].trace == runs[1].trace
    for name, block in runs[0].checkpoint.params.items():
        np.testing.assert_array_equal(block, runs[1].checkpoint.params[name])
