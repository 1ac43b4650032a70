import numpy as np
import pytest

from mtfeel.nn import (DeviceShard, LossSpec, ModelParams, accuracy, architecture, empirical_loss,
                       forward, init_params, loss_gradient, param_count, predict)
from oracles import central_diff, rel_err, scalar_loss, scalar_mlp_probs


def _shard(X, y, n_classes, train=None):
    train = len(y) if train is None else train
    return DeviceShard(X, y, train, len(y) - train, n_classes)


def test_param_count_matches_layout():
    dims = architecture(784, 10)
    assert dims == ((784, 32), (32, 10)) or list(dims) == [(784, 32), (32, 10)]
    assert param_count(dims) == 785 * 32 + 33 * 10


def test_model_params_validation():
    dims = architecture(2, 2, (2,))
    with pytest.raises(ValueError):
        ModelParams(np.zeros(3), dims)
    bad = np.zeros(param_count(dims))
    bad[0] = np.nan
    with pytest.raises(ValueError):
        ModelParams(bad, dims)


def test_zero_params_give_uniform_probabilities():
    dims = architecture(5, 10)
    p = forward(ModelParams(np.zeros(param_count(dims)), dims), np.arange(5.0))
    np.testing.assert_allclose(p, np.full(10, 0.1), atol=1e-15)


def test_probabilities_sum_to_one():
    rng = np.random.default_rng(0)
    dims = architecture(6, 4, (5,))
    w = init_params(dims, seed=1)
    P = forward(w, rng.normal(size=(100, 6)) * 3)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(P >= 0)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_forward_matches_scalar_loop_on_2_2_2(activation):
    dims = ((2, 2), (2, 2))
    values = np.array([0.5, -1.0, 0.25, 2.0, 0.1, -0.3, 1.5, -0.5, 0.7, 0.2, 0.0, 0.4])
    w = ModelParams(values, dims, activation)
    for x in ([1.0, 2.0], [-0.5, 0.3], [0.0, 0.0]):
        np.testing.assert_allclose(forward(w, x), scalar_mlp_probs(values, dims, activation, x), atol=1e-14)


def test_zero_params_loss_is_log_c():
    rng = np.random.default_rng(0)
    dims = architecture(4, 10)
    sh = _shard(rng.normal(size=(30, 4)), rng.integers(10, size=30), 10)
    assert empirical_loss(ModelParams(np.zeros(param_count(dims)), dims), sh) == pytest.approx(np.log(10), abs=1e-12)


def test_clipping_saturates_at_bound():
    rng = np.random.default_rng(0)
    dims = architecture(4, 10)
    sh = _shard(rng.normal(size=(30, 4)), rng.integers(10, size=30), 10)
    w = ModelParams(np.zeros(param_count(dims)), dims)
    assert empirical_loss(w, sh, loss=LossSpec(bound_M=0.5)) == 0.5
    assert np.all(loss_gradient(w, sh, loss=LossSpec(bound_M=0.5)) == 0)


def test_loss_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    dims = architecture(3, 4, (5,))
    w = init_params(dims, "tanh", seed=2).with_values(rng.normal(size=param_count(dims)))
    X, y = rng.normal(size=(12, 3)), rng.integers(4, size=12)
    sh = _shard(X, y, 4)
    assert abs(empirical_loss(w, sh, loss=LossSpec(bound_M=3.0)) - scalar_loss(w.values, dims, "tanh", X, y, 3.0)) < 1e-10


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_gradient_matches_finite_differences_2_4_3(activation):
    rng = np.random.default_rng(7)
    dims = ((2, 4), (4, 3))
    X, y = rng.normal(size=(8, 2)), rng.integers(3, size=8)
    sh = _shard(X, y, 3)
    for trial in range(5):
        v = rng.normal(size=param_count(dims)) * 0.7
        w = ModelParams(v, dims, activation)
        num = central_diff(lambda u: empirical_loss(w.with_values(u), sh), v)
        assert rel_err(loss_gradient(w, sh), num) <= 1e-4


def test_gradient_vanishes_at_interpolating_minimum():
    # Linear softmax model on separable points with a large margin.
    X = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    y = np.array([0, 1, 2])
    dims = architecture(2, 3, ())
    W = np.array([[40.0, 0.0, -40.0], [0.0, 40.0, -40.0]])
    w = ModelParams(np.concatenate([W.ravel(), np.zeros(3)]), dims)
    assert np.linalg.norm(loss_gradient(w, _shard(X, y, 3))) < 1e-6


def test_gradient_is_mean_over_disjoint_subsets():
    rng = np.random.default_rng(1)
    dims = architecture(3, 4, (6,))
    w = init_params(dims, seed=0)
    sh = _shard(rng.normal(size=(10, 3)), rng.integers(4, size=10), 4)
    A, B = np.arange(3), np.arange(3, 10)
    g = loss_gradient(w, sh, np.arange(10))
    np.testing.assert_allclose(g, (3 * loss_gradient(w, sh, A) + 7 * loss_gradient(w, sh, B)) / 10, atol=1e-14)


def test_accuracy_cases():
    rng = np.random.default_rng(0)
    dims = architecture(4, 3, (5,))
    w = init_params(dims, seed=4)
    X = rng.normal(size=(5, 4))
    sh = _shard(X, predict(w, X), 3)
    assert accuracy(w, sh, "train") == 1.0
    # Hand count: flip labels of samples 1 and 3.
    y = predict(w, X).copy()
    y[[1, 3]] = (y[[1, 3]] + 1) % 3
    assert accuracy(w, _shard(X, y, 3), "train") == pytest.approx(3 / 5)


def test_zero_params_accuracy_is_class0_frequency():
    y = np.repeat(np.arange(10), 7)
    dims = architecture(2, 10)
    w = ModelParams(np.zeros(param_count(dims)), dims)
    sh = _shard(np.random.default_rng(0).normal(size=(70, 2)), y, 10)
    assert accuracy(w, sh, "train") == pytest.approx(0.1)


def test_shard_subsets():
    sh = DeviceShard(np.zeros((5, 2)), np.array([0, 1, 0, 1, 0]), 2, 3, 2)
    assert list(sh.indices("train")) == [0, 1]
    assert list(sh.indices("test")) == [2, 3, 4]
    with pytest.raises(ValueError):
        sh.indices([])
    with pytest.raises(ValueError):
        DeviceShard(np.zeros((2, 2)), np.array([0, 5]), 1, 1, 2)
    with pytest.raises(ValueError):
        forward(init_params(architecture(3, 2)), np.zeros(2))
