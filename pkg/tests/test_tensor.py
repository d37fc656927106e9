import numpy as np
import pytest

from conftest import numeric_grad
from roi_cae.exceptions import ShapeMismatchError
from roi_cae.tensor import (
    Rng,
    Tensor,
    affine,
    avg_pool2,
    backward,
    conv2d,
    conv_transpose2d,
    cross_entropy,
    global_avg_pool,
    leaky_relu,
    pad_replicate,
    pointwise_activation,
    parameter,
    reduce_max,
    reduce_mean,
    reduce_sum,
    sigmoid,
    sqrt,
)

GRADIENT_SEEDS = range(20)


def _check_gradients(build, arrays, atol=1e-6, rtol=1e-4):
    """Compare tape gradients of ``build(**tensors)`` against central differences."""
    tensors = {name: parameter(value.copy(), name) for name, value in arrays.items()}
    grads = backward(build(**tensors), tensors)
    for name, value in arrays.items():
        def scalar(perturbed, name=name):
            inputs = {k: Tensor(v) for k, v in arrays.items()}
            inputs[name] = Tensor(perturbed)
            return build(**inputs).item()

        expected = numeric_grad(scalar, value.copy())
        np.testing.assert_allclose(grads[name], expected, atol=atol, rtol=rtol)


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
def test_elementwise_chain_gradients(seed):
    rng = np.random.default_rng(seed)
    arrays = {"a": rng.uniform(0.5, 1.5, (3, 4)), "b": rng.uniform(0.5, 1.5, (4,))}

    def build(a, b):
        h = sigmoid(a * b - 1.0) / (a + b) + sqrt(a) * 0.5
        return reduce_mean(leaky_relu(h - 0.4, 0.2) ** 2.0)

    _check_gradients(build, arrays)


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
def test_conv2d_gradients(seed):
    rng = np.random.default_rng(seed)
    arrays = {
        "x": rng.normal(size=(2, 2, 6, 6)),
        "k": rng.normal(size=(3, 2, 4, 4)),
        "b": rng.normal(size=(3,)),
    }
    weights = rng.normal(size=(2, 3, 3, 3))

    def build(x, k, b):
        return reduce_sum(conv2d(x, k, b, stride=2, padding=1) * weights)

    _check_gradients(build, arrays)


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
def test_conv_transpose2d_gradients(seed):
    rng = np.random.default_rng(seed)
    arrays = {
        "x": rng.normal(size=(1, 3, 3, 4)),
        "k": rng.normal(size=(3, 2, 4, 4)),
        "b": rng.normal(size=(2,)),
    }
    weights = rng.normal(size=(1, 2, 6, 8))

    def build(x, k, b):
        return reduce_sum(sigmoid(conv_transpose2d(x, k, b, stride=2, padding=1)) * weights)

    _check_gradients(build, arrays)


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
def test_pooling_padding_and_max_gradients(seed):
    rng = np.random.default_rng(seed)
    arrays = {"x": rng.normal(size=(2, 1, 5, 6))}
    weights = rng.normal(size=(2, 1, 3, 4))

    def build(x):
        padded = pad_replicate(x, 1)
        pooled = avg_pool2(padded)
        return reduce_sum(pooled * weights) + reduce_mean(
            reduce_max(padded, axis=(1, 2, 3))
        )

    _check_gradients(build, arrays)


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
def test_affine_cross_entropy_gradients(seed):
    rng = np.random.default_rng(seed)
    arrays = {
        "x": rng.normal(size=(5, 3)),
        "w": rng.normal(size=(4, 3)),
        "b": rng.normal(size=(4,)),
    }
    labels = np.array([0, 3, 1, 1, 2])

    def build(x, w, b):
        return cross_entropy(affine(x, w, b), labels)

    _check_gradients(build, arrays)


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
def test_global_avg_pool_gradient(seed):
    rng = np.random.default_rng(seed)
    arrays = {"x": rng.normal(size=(2, 3, 2, 3))}
    weights = rng.normal(size=(2, 3))

    def build(x):
        return reduce_sum(global_avg_pool(x) * weights)

    _check_gradients(build, arrays)


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 2, 8, 8))
    kernel = rng.normal(size=(3, 2, 4, 4))
    y = rng.normal(size=(1, 3, 4, 4))
    forward = conv2d(x, kernel, np.zeros(3), stride=2, padding=1).data
    adjoint = conv_transpose2d(y, kernel, np.zeros(2), stride=2, padding=1).data
    assert forward.shape == y.shape
    assert adjoint.shape == x.shape
    assert np.sum(forward * y) == pytest.approx(np.sum(x * adjoint), rel=1e-10)


def test_stride_two_shapes_halve_and_double():
    x = np.zeros((2, 1, 32, 48))
    down = conv2d(x, np.zeros((4, 1, 4, 4)), np.zeros(4), stride=2, padding=1)
    assert down.shape == (2, 4, 16, 24)
    up = conv_transpose2d(down, np.zeros((4, 1, 4, 4)), np.zeros(1), stride=2, padding=1)
    assert up.shape == (2, 1, 32, 48)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeMismatchError):
        conv2d(np.zeros((1, 2, 8, 8)), np.zeros((3, 1, 3, 3)), np.zeros(3))
    with pytest.raises(ShapeMismatchError):
        conv2d(np.zeros((1, 1, 8, 8)), np.zeros((3, 1, 3, 3)), np.zeros(2))


def test_pad_replicate_values():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    padded = pad_replicate(x, 1).data[0, 0]
    np.testing.assert_array_equal(padded[0], [1.0, 1.0, 2.0, 2.0])
    np.testing.assert_array_equal(padded[:, 0], [1.0, 1.0, 3.0, 3.0])
    assert padded.shape == (4, 4)


def test_avg_pool2_drops_odd_edge():
    x = np.arange(15, dtype=float).reshape(1, 1, 3, 5)
    pooled = avg_pool2(x).data
    assert pooled.shape == (1, 1, 1, 2)
    np.testing.assert_allclose(pooled[0, 0, 0], [3.0, 5.0])


def test_unreached_parameter_gets_zero_gradient():
    a = parameter(np.ones(3), "a")
    b = parameter(np.ones(2), "b")
    grads = backward(reduce_sum(a * 2.0), {"a": a, "b": b})
    np.testing.assert_array_equal(grads["a"], [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(grads["b"], [0.0, 0.0])


def test_backward_needs_scalar():
    a = parameter(np.ones(3), "a")
    with pytest.raises(ShapeMismatchError):
        backward(a * 2.0, {"a": a})


def test_rng_streams_are_reproducible_and_distinct():
    first = Rng(11).stream("init").normal(size=5)
    again = Rng(11).stream("init").normal(size=5)
    other = Rng(11).stream("shuffle/P1").normal(size=5)
    np.testing.assert_array_equal(first, again)
    assert not np.allclose(first, other)


def test_pointwise_activation_values():
    x = np.array([-2.0, 0.0, 3.0])
    np.testing.assert_allclose(pointwise_activation(x, "leaky_relu").data, [-0.2, 0.0, 3.0])
    np.testing.assert_allclose(
        pointwise_activation(x, "leaky_relu", alpha=0.5).data, [-1.0, 0.0, 3.0]
    )
    out = pointwise_activation(x, "sigmoid").data
    assert out[1] == pytest.approx(0.5)
    assert np.all((out > 0.0) & (out < 1.0))
    with pytest.raises(ValueError):
        pointwise_activation(x, "tanh")
