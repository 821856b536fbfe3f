import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asyncdrop.errors import ConfigError, DimensionError, NumericError
from asyncdrop.masking import DropoutMask
from asyncdrop.nn import (CnnModel, Dataset, cnn_forward, cnn_gradient, cnn_predict, init_cnn,
                          init_mlp, mlp_forward_backward, mse_loss, patch, patch_batch, sgd_step)
from conftest import central_difference, relative_error


def test_patch_identity_for_width_one(rng):
    img = rng.standard_normal((3, 5))
    assert np.array_equal(patch(img, 1), img)


def test_patch_zero_pads_right_edge():
    out = patch(np.array([[1.0, 2.0, 3.0]]), 2)
    assert out.T.tolist() == [[1, 2], [2, 3], [3, 0]]


def test_patch_zero_image():
    out = patch(np.zeros((2, 4)), 3)
    assert out.shape == (6, 4) and not out.any()


def test_patch_stacks_channels(rng):
    img = rng.standard_normal((2, 4))
    out = patch(img, 2)
    assert np.array_equal(out[:, 1], np.concatenate([img[:, 1], img[:, 2]]))


def test_patch_rejects_wide_window():
    with pytest.raises(ConfigError):
        patch(np.zeros((1, 3)), 4)


@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_patch_norm_bound(d_hat, p, q, seed):
    q = min(q, p)
    img = np.random.default_rng(seed).standard_normal((d_hat, p))
    assert np.linalg.norm(patch(img, q)) <= np.sqrt(q) * np.linalg.norm(img) + 1e-12


def test_forward_zero_weights_is_zero(rng):
    model = init_cnn(4, 2, 3, 2, rng=rng)
    model = model.with_weights(np.zeros_like(model.W))
    assert cnn_forward(model, rng.standard_normal((4, 3))) == 0.0


def test_forward_linear_in_scale(rng):
    model = init_cnn(6, 2, 3, 2, scale=0.5, rng=rng)
    x = rng.standard_normal((4, 3))
    doubled = CnnModel(model.W, model.a, model.q, 1.0)
    assert cnn_forward(doubled, x) == pytest.approx(2 * cnn_forward(model, x), rel=1e-15)


def test_forward_scalar_reference():
    model = CnnModel(np.array([[1.0, 0.0]]), np.array([[1.0]]), q=1, scale=1.0)
    assert cnn_forward(model, np.array([[2.0], [5.0]])) == 2.0


def test_forward_shape_mismatch(rng):
    model = init_cnn(4, 2, 3, 2, rng=rng)
    with pytest.raises(DimensionError):
        cnn_forward(model, np.zeros((3, 3)))


def test_second_layer_values_and_immutability(rng):
    model = init_cnn(16, 1, 5, 1, rng=rng)
    assert np.allclose(np.abs(model.a), 1 / (5 * 4))
    with pytest.raises(ValueError):
        model.a[0, 0] = 1.0


def test_initialization_statistics():
    kappa = 0.7
    model = init_cnn(50_000, 1, 1, 1, kappa=kappa, rng=0)
    w = model.W.ravel()
    n = w.size
    assert abs(w.mean()) <= 3 * kappa / np.sqrt(n)
    # var of the sample variance of a Gaussian is 2 sigma^4 / (n - 1)
    assert abs(w.var() - kappa ** 2) <= 3 * np.sqrt(2 / (n - 1)) * kappa ** 2


def _cnn_instance(seed, n=4, m=8, d_hat=2, p=4, q=2, scale=1.0):
    rng = np.random.default_rng(seed)
    model = init_cnn(m, d_hat, p, q, scale=scale, rng=rng)
    xhat = patch_batch(rng.standard_normal((n, d_hat, p)), q)
    y = rng.uniform(-1, 1, n)
    return model, xhat, y


def test_zero_residual_gives_zero_gradient():
    model, xhat, _ = _cnn_instance(0)
    y = cnn_predict(model, xhat)
    assert not cnn_gradient(model, (xhat, y)).any()


def test_dropped_filter_gradient_row_is_zero():
    model, xhat, y = _cnn_instance(1)
    kept = np.ones(8, dtype=bool)
    kept[3] = False
    g = cnn_gradient(model, (xhat, y), DropoutMask(kept, 0.875))
    assert not g[3].any() and g[np.arange(8) != 3].any()


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("masked", [False, True])
def test_cnn_gradient_matches_finite_differences(seed, masked):
    model, xhat, y = _cnn_instance(seed, scale=0.5)
    mask = None
    if masked:
        mask = DropoutMask(np.random.default_rng(seed).random(8) < 0.6, 0.6, "bernoulli")

    def half_loss(W):
        return 0.5 * mse_loss(cnn_predict(model.with_weights(W), xhat, mask), y)

    fd = central_difference(half_loss, model.W)
    assert relative_error(cnn_gradient(model, (xhat, y), mask), fd) <= 1e-6


def test_cnn_gradient_accepts_dataset(rng):
    model, xhat, y = _cnn_instance(5)
    images = rng.standard_normal((4, 2, 4))
    data = Dataset(images, y)
    assert np.array_equal(cnn_gradient(model, data), cnn_gradient(model, (patch_batch(images, 2), y)))


def _mlp_instance(seed, n=6, d=5, h=7, out=3):
    rng = np.random.default_rng(seed)
    model = init_mlp(d, h, out, rng)
    X = rng.standard_normal((n, d))
    Y = rng.standard_normal((n, out))
    return model, X, Y


def test_mlp_empty_drop_set_equals_unmasked():
    model, X, Y = _mlp_instance(0)
    full = DropoutMask(np.ones(7, dtype=bool), 1.0)
    l1, g1 = mlp_forward_backward(model, (X, Y))
    l2, g2 = mlp_forward_backward(model, (X, Y), full)
    assert l1 == l2 and all(np.array_equal(g1[k], g2[k]) for k in g1)


def test_mlp_all_dropped_is_zero_map():
    model, X, Y = _mlp_instance(1)
    none = DropoutMask(np.zeros(7, dtype=bool), 0.5)
    loss, g = mlp_forward_backward(model, (X, Y), none)
    assert loss == mse_loss(np.zeros_like(Y), Y)
    assert not g["W1"].any() and not g["W2"].any()


def test_mlp_masked_neuron_gets_zero_gradient():
    model, X, Y = _mlp_instance(2)
    kept = np.ones(7, dtype=bool)
    kept[[0, 4]] = False
    _, g = mlp_forward_backward(model, (X, Y), DropoutMask(kept, 5 / 7))
    assert not g["W1"][[0, 4]].any() and not g["W2"][:, [0, 4]].any()


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("loss", ["mse", "xent"])
def test_mlp_gradient_matches_finite_differences(seed, loss):
    model, X, Y = _mlp_instance(seed)
    if loss == "xent":
        Y = np.eye(3)[np.random.default_rng(seed).integers(0, 3, len(X))]
    mask = DropoutMask(np.random.default_rng(seed + 99).random(7) < 0.7, 0.7, "bernoulli")
    _, g = mlp_forward_backward(model, (X, Y), mask, loss)
    fd1 = central_difference(
        lambda W: mlp_forward_backward(type(model)(W, model.W2), (X, Y), mask, loss)[0], model.W1)
    fd2 = central_difference(
        lambda W: mlp_forward_backward(type(model)(model.W1, W), (X, Y), mask, loss)[0], model.W2)
    assert relative_error(g["W1"], fd1) <= 1e-6
    assert relative_error(g["W2"], fd2) <= 1e-6


def test_mse_loss_examples():
    assert mse_loss([1.0, 2.0], [1.0, 2.0]) == 0
    assert mse_loss([0, 0], [1, 1]) == 2
    assert mse_loss([1, 2, 3], [0, 0, 0]) == 14
    with pytest.raises(DimensionError):
        mse_loss([1, 2], [1])


def test_sgd_step_examples():
    assert np.array_equal(sgd_step(np.array([1.0, 2.0]), np.zeros(2), 0.3), [1.0, 2.0])
    assert np.array_equal(sgd_step(np.array([1.0]), np.array([5.0]), 0.0), [1.0])
    assert sgd_step(np.array([1.0]), np.array([2.0]), 0.5).tolist() == [0.0]
    with pytest.raises(NumericError):
        sgd_step(np.array([1.0]), np.array([np.nan]), 0.1)


def test_sgd_step_on_mapping():
    out = sgd_step({"a": np.ones(2)}, {"a": np.ones(2)}, 0.5)
    assert out["a"].tolist() == [0.5, 0.5]


@given(st.floats(0, 10), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_relu_homogeneity(c, seed):
    model, xhat, _ = _cnn_instance(seed)
    pre = np.maximum(np.einsum("rd,ndp->nrp", model.W, xhat), 0)
    scaled = np.maximum(np.einsum("rd,ndp->nrp", model.W, c * xhat), 0)
    assert np.allclose(scaled, c * pre, rtol=1e-12, atol=1e-12)


def test_masked_steps_never_touch_dropped_filter():
    model, xhat, y = _cnn_instance(3)
    kept = np.ones(8, dtype=bool)
    kept[[1, 6]] = False
    mask = DropoutMask(kept, 0.75)
    W = model.W.copy()
    for _ in range(25):
        W = sgd_step(W, cnn_gradient(model.with_weights(W), (xhat, y), mask), 0.3)
    assert np.array_equal(W[[1, 6]], model.W[[1, 6]])
