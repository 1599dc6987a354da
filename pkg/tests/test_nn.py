"""Layer kernels: hand fixtures plus finite-difference gradient checks."""

import numpy as np
import pytest

from _gradcheck import TOL, check_layer, rel_error, numeric_grad
from ircount.nn import (
    BatchNorm2D,
    CausalConv1D,
    Conv2D,
    Dense,
    LSTM,
    MaxPool2x2,
    ReLU,
    sigmoid,
    softmax,
    weighted_softmax_xent,
)

F64 = np.float64


# -- conv2d ------------------------------------------------------------


def test_conv_all_ones():
    conv = Conv2D(1, 1, dtype=F64)
    conv.params["kernel"][:] = 1.0
    out = conv.forward(np.ones((1, 8, 8, 1)))
    assert out.shape == (1, 6, 6, 1)
    assert np.allclose(out, 9.0)


def test_conv_zero_input_gives_bias():
    conv = Conv2D(2, 3, dtype=F64)
    conv.params["bias"][:] = [0.5, -1.0, 2.0]
    out = conv.forward(np.zeros((2, 8, 8, 2)))
    assert np.allclose(out, np.array([0.5, -1.0, 2.0]))


def test_conv_channel_mismatch():
    conv = Conv2D(2, 3, dtype=F64)
    with pytest.raises(ValueError):
        conv.forward(np.zeros((1, 8, 8, 5)))


@pytest.mark.parametrize("seed", range(5))
def test_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    conv = Conv2D(2, 3, dtype=F64)
    conv.params["kernel"] = rng.normal(size=(3, 3, 2, 3))
    conv.params["bias"] = rng.normal(size=3)
    x = rng.normal(size=(2, 6, 6, 2))
    assert check_layer(conv, x, seed) < TOL


# -- batchnorm ---------------------------------------------------------


def test_bn_identity_on_standardized_batch(rng):
    x = rng.normal(size=(16, 4, 4, 3))
    x = (x - x.mean(axis=(0, 1, 2))) / x.std(axis=(0, 1, 2))
    bn = BatchNorm2D(3, dtype=F64)
    out = bn.forward(x, train=True)
    # eps=1e-3 shrinks the output slightly; undo it for the comparison
    assert np.allclose(out * np.sqrt(1 + 1e-3), x, atol=1e-6)


def test_bn_infer_equals_folded_affine(rng):
    bn = BatchNorm2D(3, dtype=F64)
    bn.params["gamma"] = rng.normal(size=3) + 1.5
    bn.params["beta"] = rng.normal(size=3)
    bn.running_mean = rng.normal(size=3)
    bn.running_var = rng.uniform(0.5, 2.0, size=3)
    x = rng.normal(size=(4, 4, 4, 3))
    a, b = bn.infer_affine()
    assert np.array_equal(bn.forward(x, train=False), a * x + b)


@pytest.mark.parametrize("seed", range(5))
def test_bn_gradients(seed):
    rng = np.random.default_rng(seed)
    bn = BatchNorm2D(2, dtype=F64)
    bn.params["gamma"] = rng.uniform(0.5, 1.5, size=2)
    bn.params["beta"] = rng.normal(size=2)
    x = rng.normal(size=(4, 3, 3, 2))
    assert check_layer(bn, x, seed) < TOL


# -- maxpool -----------------------------------------------------------


def test_maxpool_single_peak():
    x = np.zeros((1, 6, 6, 1))
    x[0, 0, 0, 0] = 5.0
    out = MaxPool2x2().forward(x)
    assert out.shape == (1, 3, 3, 1)
    assert out[0, 0, 0, 0] == 5.0
    assert out.sum() == 5.0


def test_maxpool_constant():
    out = MaxPool2x2().forward(np.full((2, 4, 4, 3), 2.5))
    assert np.allclose(out, 2.5)


def test_maxpool_gradient_conservation(rng):
    pool = MaxPool2x2()
    x = rng.normal(size=(3, 6, 6, 2))
    out = pool.forward(x)
    d = rng.normal(size=out.shape)
    dx = pool.backward(d)
    assert np.isclose(dx.sum(), d.sum())


def test_maxpool_odd_extent_rejected():
    with pytest.raises(ValueError):
        MaxPool2x2().forward(np.zeros((1, 5, 6, 1)))


@pytest.mark.parametrize("seed", range(3))
def test_maxpool_gradients(seed):
    rng = np.random.default_rng(seed)
    # well-separated values keep the argmax stable under the FD step
    x = rng.permutation(np.arange(64, dtype=F64)).reshape(2, 4, 4, 2) * 0.1
    assert check_layer(MaxPool2x2(), x, seed) < TOL


# -- dense -------------------------------------------------------------


def test_dense_identity():
    fc = Dense(4, 4, dtype=F64)
    fc.params["weight"] = np.eye(4)
    x = np.arange(8, dtype=F64).reshape(2, 4)
    assert np.array_equal(fc.forward(x), x)


def test_dense_zero_weight_gives_activated_bias():
    fc = Dense(3, 2, activation="relu", dtype=F64)
    fc.params["bias"][:] = [1.5, -2.0]
    out = fc.forward(np.ones((4, 3)))
    assert np.allclose(out, [1.5, 0.0])


def test_dense_length_mismatch():
    with pytest.raises(ValueError):
        Dense(3, 2, dtype=F64).forward(np.ones((1, 5)))


@pytest.mark.parametrize("activation", ["none", "relu"])
@pytest.mark.parametrize("seed", range(3))
def test_dense_gradients(seed, activation):
    rng = np.random.default_rng(seed)
    fc = Dense(5, 3, activation=activation, dtype=F64)
    fc.params["weight"] = rng.normal(size=(5, 3))
    fc.params["bias"] = rng.normal(size=3)
    x = rng.normal(size=(4, 5))
    assert check_layer(fc, x, seed) < TOL


# -- lstm --------------------------------------------------------------


def test_lstm_zero_weights_zero_state():
    lstm = LSTM(3, 4, dtype=F64)
    h = lstm.forward(np.ones((2, 5, 3)))
    assert np.allclose(h, 0.0)


def test_lstm_forget_bias_keeps_cell():
    lstm = LSTM(2, 3, dtype=F64)
    lstm.params["bias"][3:6] = 10.0  # forget gate
    c_prev = np.array([[0.7, -0.3, 1.2]])
    h, c, _ = LSTM.cell_step(
        np.zeros((1, 2)),
        np.zeros((1, 3)),
        c_prev,
        lstm.params["wx"],
        lstm.params["wh"],
        lstm.params["bias"],
        3,
    )
    assert np.abs(c - c_prev * sigmoid(np.float64(10.0))).max() < 1e-4


def test_lstm_hidden_mismatch():
    lstm = LSTM(2, 3, dtype=F64)
    with pytest.raises(ValueError):
        LSTM.cell_step(
            np.zeros((1, 2)), np.zeros((1, 5)), np.zeros((1, 5)),
            lstm.params["wx"], lstm.params["wh"], lstm.params["bias"], 3,
        )


@pytest.mark.parametrize("seed", range(3))
def test_lstm_gradients_three_steps(seed):
    rng = np.random.default_rng(seed)
    lstm = LSTM(3, 4, dtype=F64)
    lstm.params["wx"] = rng.normal(size=(3, 16)) * 0.5
    lstm.params["wh"] = rng.normal(size=(4, 16)) * 0.5
    lstm.params["bias"] = rng.normal(size=16) * 0.5
    x = rng.normal(size=(2, 3, 3))
    assert check_layer(lstm, x, seed) < TOL


# -- causal conv1d -----------------------------------------------------


def test_cconv_current_tap_identity():
    tcn = CausalConv1D(1, 1, dtype=F64)
    tcn.params["kernel"][2, 0, 0] = 1.0  # current-time tap
    x = np.abs(np.random.default_rng(1).normal(size=(1, 6, 1)))
    assert np.allclose(tcn.forward(x), x)


def test_cconv_ones_kernel_running_sum():
    tcn = CausalConv1D(1, 1, dtype=F64)
    tcn.params["kernel"][:] = 1.0
    out = tcn.forward(np.ones((1, 3, 1)))
    assert np.allclose(out[0, :, 0], [1.0, 2.0, 3.0])


def test_cconv_causality(rng):
    tcn = CausalConv1D(2, 3, dtype=F64)
    tcn.params["kernel"] = rng.normal(size=(3, 2, 3))
    x = rng.normal(size=(1, 6, 2))
    base = tcn.forward(x)[0, 2]
    x2 = x.copy()
    x2[0, 3:] += 5.0  # future change must not affect out[2]
    assert np.array_equal(tcn.forward(x2)[0, 2], base)


def test_cconv_empty_time_axis():
    with pytest.raises(ValueError):
        CausalConv1D(1, 1, dtype=F64).forward(np.zeros((1, 0, 1)))


@pytest.mark.parametrize("seed", range(3))
def test_cconv_gradients(seed):
    rng = np.random.default_rng(seed)
    tcn = CausalConv1D(2, 3, dtype=F64)
    tcn.params["kernel"] = rng.normal(size=(3, 2, 3))
    tcn.params["bias"] = rng.normal(size=3)
    for _ in range(50):  # redraw until clear of the built-in ReLU kink
        x = rng.normal(size=(2, 4, 2))
        padded = np.pad(x, ((0, 0), (2, 0), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(padded, 3, axis=1)
        z = np.einsum("ntck,kco->nto", win, tcn.params["kernel"]) + tcn.params["bias"]
        if np.abs(z).min() > 5e-3:
            break
    assert check_layer(tcn, x, seed) < TOL


# -- loss --------------------------------------------------------------


def test_loss_uniform_logits():
    losses, _ = weighted_softmax_xent(np.zeros((1, 4)), np.array([2]), np.ones(4))
    assert np.isclose(losses[0], np.log(4.0))


def test_loss_weight_linearity(rng):
    logits = rng.normal(size=(1, 4))
    labels = np.array([1])
    w1 = np.ones(4)
    w2 = w1.copy()
    w2[1] = 2.0
    l1, g1 = weighted_softmax_xent(logits, labels, w1)
    l2, g2 = weighted_softmax_xent(logits, labels, w2)
    assert np.isclose(l2[0], 2 * l1[0])
    assert np.allclose(g2, 2 * g1)


def test_loss_nonnegative_and_softmax_normalized(rng):
    logits = rng.normal(size=(8, 4)) * 3
    labels = rng.integers(0, 4, size=8)
    losses, _ = weighted_softmax_xent(logits, labels, np.ones(4))
    assert (losses >= 0).all()
    assert np.allclose(softmax(logits).sum(axis=-1), 1.0, atol=1e-6)


def test_loss_label_out_of_range():
    with pytest.raises((ValueError, IndexError)):
        weighted_softmax_xent(np.zeros((1, 4)), np.array([4]), np.ones(4))


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(3, 4))
    labels = rng.integers(0, 4, size=3)
    weights = rng.uniform(0.3, 2.0, size=4)

    def loss():
        ls, _ = weighted_softmax_xent(logits, labels, weights)
        return float(ls.sum())

    _, grad = weighted_softmax_xent(logits, labels, weights)
    assert rel_error(grad, numeric_grad(loss, logits)) < TOL


def test_relu_backward_mask(rng):
    relu = ReLU()
    x = rng.normal(size=(4, 5))
    relu.forward(x)
    d = np.ones_like(x)
    assert np.array_equal(relu.backward(d), (x > 0).astype(float))
