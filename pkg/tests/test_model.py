import json

import numpy as np
import pytest

from conftest import numeric_grad
from roi_cae.exceptions import (
    CanvasError,
    CheckpointMismatchError,
    CheckpointVersionError,
    ConfigValidationError,
    CorruptCheckpointError,
    ShapeMismatchError,
)
from roi_cae.model import (
    CaeConfig,
    Checkpoint,
    ConvAutoencoder,
    full_config,
    load_checkpoint,
    parameter_shapes,
    roi_pool_features,
    save_checkpoint,
)
from roi_cae.preprocess import RoiBox
from roi_cae.tensor import Tensor, backward, reduce_mean


def test_forward_shapes(tiny_config):
    model = ConvAutoencoder.initialize(tiny_config, 0)
    params = model.tensors(requires_grad=False)
    x_hat, z_map, z = model.forward(Tensor(np.zeros((2, 1, 32, 48))), params)
    assert x_hat.shape == (2, 1, 32, 48)
    assert z_map.shape == (2, 8, 2, 3)
    assert z.shape == (2, 8)
    assert np.all((x_hat.data > 0.0) & (x_hat.data < 1.0))


def test_full_widths_fit_the_full_canvas():
    config = full_config()
    shapes = parameter_shapes(config)
    assert config.grid == (55, 80)
    assert shapes["encoder.4.weight"] == (256, 128, 4, 4)
    assert shapes["unproj.weight"] == (256 * 55 * 80, 128)
    assert shapes["decoder.4.weight"] == (32, 1, 4, 4)


def test_config_validation():
    with pytest.raises(CanvasError):
        CaeConfig(input_height=30, input_width=48)
    with pytest.raises(ConfigValidationError):
        CaeConfig(input_height=32, input_width=48, channels=(2, 4, 8))
    with pytest.raises(ConfigValidationError):
        CaeConfig(input_height=32, input_width=48, latent_dim=4)


def test_initialization_is_seeded(tiny_config):
    a = ConvAutoencoder.initialize(tiny_config, 4).params
    b = ConvAutoencoder.initialize(tiny_config, 4).params
    c = ConvAutoencoder.initialize(tiny_config, 5).params
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])
    assert not np.allclose(a["encoder.1.weight"], c["encoder.1.weight"])


def test_wrong_input_size(tiny_config):
    model = ConvAutoencoder.initialize(tiny_config, 0)
    with pytest.raises(ShapeMismatchError):
        model.encode_latent(np.zeros((32, 32)))
    with pytest.raises(ShapeMismatchError):
        model.decode_latent(np.zeros(5))


def test_model_gradients_match_finite_differences(tiny_config):
    model = ConvAutoencoder.initialize(tiny_config, 1)
    x = np.random.default_rng(0).uniform(size=(1, 1, 32, 48))
    params = model.tensors()
    x_hat, _, _ = model.forward(Tensor(x), params)
    grads = backward(reduce_mean((x_hat - x) * (x_hat - x)), params)

    for name in ("decoder.4.bias", "proj.bias", "encoder.1.bias"):
        def loss_for(block, name=name):
            trial = dict(model.params)
            trial[name] = block
            out = model.with_params(trial).reconstruct(x)
            return float(np.mean((out - x) ** 2))

        expected = numeric_grad(loss_for, model.params[name].copy())
        np.testing.assert_allclose(grads[name], expected, atol=1e-7, rtol=1e-4)


def test_roi_pool_covers_touched_cells():
    z_map = np.arange(2 * 2 * 3, dtype=float).reshape(2, 2, 3)
    single = roi_pool_features(z_map, RoiBox(1.0, 1.0, 15.0, 15.0))
    np.testing.assert_allclose(single, z_map[:, 0, 0])
    spanning = roi_pool_features(z_map, RoiBox(10.0, 2.0, 20.0, 12.0))
    np.testing.assert_allclose(spanning, z_map[:, 0, 0:2].mean(axis=1))


def test_checkpoint_round_trip(tmp_path, tiny_config):
    model = ConvAutoencoder.initialize(tiny_config, 2)
    checkpoint = Checkpoint.from_model(model, "P1", seed=2, epoch=3)
    path = save_checkpoint(checkpoint, tmp_path / "ckpt.json")
    loaded = load_checkpoint(path, tiny_config)
    assert loaded.phase == "P1"
    assert loaded.config == tiny_config
    assert loaded.metadata == {"seed": 2, "epoch": 3}
    for name, block in model.params.items():
        np.testing.assert_array_equal(loaded.params[name], block)


def test_truncated_checkpoint_is_rejected(tmp_path, tiny_config):
    path = save_checkpoint(
        Checkpoint.from_model(ConvAutoencoder.initialize(tiny_config, 0), "P1"),
        tmp_path / "ckpt.json",
    )
    text = path.read_text(encoding="utf-8")
    path.write_text(text[: len(text) // 2], encoding="utf-8")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_checkpoint_version_and_config_mismatch(tmp_path, tiny_config):
    path = save_checkpoint(
        Checkpoint.from_model(ConvAutoencoder.initialize(tiny_config, 0), "P2"),
        tmp_path / "ckpt.json",
    )
    other = CaeConfig(
        input_height=32, input_width=48, channels=(2, 4, 4, 8), bottleneck_channels=8, latent_dim=16
    )
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(path, other)

    document = json.loads(path.read_text(encoding="utf-8"))
    document["version"] = 99
    path.write_text(json.dumps(document), encoding="utf-8")
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_tampered_parameter_shape(tmp_path, tiny_config):
    path = save_checkpoint(
        Checkpoint.from_model(ConvAutoencoder.initialize(tiny_config, 0), "P1"),
        tmp_path / "ckpt.json",
    )
    document = json.loads(path.read_text(encoding="utf-8"))
    document["params"]["proj.bias"]["shape"] = [4, 2]
    path.write_text(json.dumps(document), encoding="utf-8")
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(path)


def test_params_must_be_an_object(tmp_path, tiny_config):
    path = save_checkpoint(
        Checkpoint.from_model(ConvAutoencoder.initialize(tiny_config, 0), "P1"),
        tmp_path / "ckpt.json",
    )
    document = json.loads(path.read_text(encoding="utf-8"))
    document["params"] = ["proj.bias"]
    path.write_text(json.dumps(document), encoding="utf-8")
    with pytest.raises(CorruptCheckpointError) as err:
        load_checkpoint(path)
    assert "got list" in str(err.value)
