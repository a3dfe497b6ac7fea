import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surt import functional as F
from surt.gradcheck import finite_difference_check
from surt.nn import cnn_forward, cnn_out_freq, init_cnn, init_lstm
from surt.tensor import DimensionError, Tensor


def conv_reference(x, k, pad_spec):
    """Direct loop cross-correlation of x [C_in, T, F]."""
    C_in, T, Fq = x.shape
    _, C_out, kT, kF = k.shape
    xp = np.pad(x, ((0, 0), (pad_spec.past, pad_spec.future), (pad_spec.freq, pad_spec.freq)))
    To, Fo = xp.shape[1] - kT + 1, xp.shape[2] - kF + 1
    y = np.zeros((C_out, To, Fo))
    for o in range(C_out):
        for t in range(To):
            for f in range(Fo):
                y[o, t, f] = np.sum(xp[:, t : t + kT, f : f + kF] * k[:, o])
    return y


def test_linear_hand_cases():
    y = F.linear(Tensor(np.array([1.0, 2.0])), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    assert y.data.tolist() == [1.0, 2.0]
    y = F.linear(Tensor(np.array([1.0, 0.0])), Tensor(np.array([[2.0, 3.0], [5.0, 7.0]])), Tensor(np.ones(2)))
    assert y.data.tolist() == [3.0, 4.0]


def test_linear_weight_gradient():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((4, 3)))
    W = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    assert finite_difference_check(lambda: F.linear(x, W, b).sum(), [W, b]) <= 1e-6


def test_conv_all_ones_center():
    x = Tensor(np.ones((1, 3, 3)))
    k = Tensor(np.ones((1, 1, 3, 3)))
    y = F.conv2d(x, k, pad_spec=F.PadSpec(1, 1, 1))
    assert y.data[0, 1, 1] == 9.0
    assert F.conv2d(x, k, pad_spec=F.PadSpec(0, 0, 0)).data.tolist() == [[[9.0]]]


def test_conv_delta_kernel_is_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 5, 7))
    k = np.zeros((2, 2, 3, 3))
    k[0, 0, 1, 1] = k[1, 1, 1, 1] = 1.0
    assert np.allclose(F.conv2d(Tensor(x), Tensor(k)).data, x)


@pytest.mark.parametrize("lookahead", [0, 1, 2])
def test_conv_matches_loop_reference(lookahead):
    rng = np.random.default_rng(2 + lookahead)
    x = rng.standard_normal((3, 6, 8))
    k = rng.standard_normal((3, 2, 3, 3))
    spec = F.PadSpec.causal(3, lookahead)
    assert np.allclose(F.conv2d(Tensor(x), Tensor(k), pad_spec=spec).data, conv_reference(x, k, spec), atol=1e-12)


def test_conv_gradients():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 2, 5, 6)), requires_grad=True)
    k = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    w = rng.standard_normal((2, 3, 5, 6))
    f = lambda: (F.conv2d(x, k, b, F.PadSpec.causal(3, 1)) * w).sum()
    assert finite_difference_check(f, [k], eps=1e-4) <= 1e-5
    assert finite_difference_check(f, [x, b], eps=1e-4) <= 1e-5


def test_conv_lookahead_over_budget_is_config_error():
    x, k = Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3)))
    with pytest.raises(F.ConfigError):
        F.conv2d(x, k, pad_spec=F.PadSpec.causal(3, 2), max_lookahead=1)
    with pytest.raises(F.ConfigError):
        F.PadSpec.causal(3, 3)


def test_conv_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(np.ones((1, 1, 1))), Tensor(np.ones((1, 1, 3, 3))), pad_spec=F.PadSpec(0, 0, 0))


def test_maxpool_cases():
    assert F.maxpool2d(Tensor(np.array([[[1.0, 5.0, 3.0]]]))).data.ravel().tolist() == [5.0]
    x = Tensor(np.full((1, 2, 6), 2.0), requires_grad=True)
    y = F.maxpool2d(x)
    assert np.all(y.data == 2.0)
    y.sum().backward()
    assert x.grad[0, 0].tolist() == [1, 0, 0, 1, 0, 0]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_maxpool_matches_brute_force(seed):
    x = np.random.default_rng(seed).standard_normal((1, 1, 9))
    y = F.maxpool2d(Tensor(x)).data.ravel()
    assert y.tolist() == [x[0, 0, i : i + 3].max() for i in (0, 3, 6)]


def test_maxpool_channels_last_axis():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 9, 4))
    y = F.maxpool2d(Tensor(x), axis=-2).data
    ref = np.moveaxis(F.maxpool2d(Tensor(np.moveaxis(x, -2, -1))).data, -1, -2)
    assert np.array_equal(y, ref)


def test_maxpool_empty_window():
    with pytest.raises(DimensionError):
        F.maxpool2d(Tensor(np.ones((1, 1, 2))), window=3)


def test_lstm_zero_params_zero_state():
    params = {k: Tensor(np.zeros(s)) for k, s in (("W_x", (3, 8)), ("W_h", (2, 8)), ("b", (8,)))}
    h, c = F.lstm_step(np.ones(3), np.zeros(2), np.zeros(2), params)
    assert np.all(h.data == 0.0)


def test_lstm_saturated_forget_keeps_cell():
    H = 2
    b = np.zeros(4 * H)
    b[:H] = -50.0  # input gate closed
    b[H : 2 * H] = 50.0  # forget gate open
    params = {"W_x": Tensor(np.zeros((3, 4 * H))), "W_h": Tensor(np.zeros((H, 4 * H))), "b": Tensor(b)}
    c_prev = np.array([0.3, -0.7])
    _, c = F.lstm_step(np.ones(3), np.zeros(H), c_prev, params)
    assert np.allclose(c.data, c_prev, atol=1e-12)


def test_fused_lstm_matches_stepwise_and_gradients():
    rng = np.random.default_rng(5)
    p = init_lstm(rng, 3, 4)
    x = Tensor(rng.standard_normal((2, 3, 3)), requires_grad=True)
    fused = F.lstm(x, p).data
    h = c = np.zeros((2, 4))
    for t in range(3):
        h, c = F.lstm_step(x.data[:, t], h, c, p)
        h, c = h.data, c.data
        assert np.allclose(fused[:, t], h, atol=1e-12)
    w = rng.standard_normal(fused.shape)
    params = [x] + list(p.values())
    assert finite_difference_check(lambda: (F.lstm(x, p) * w).sum(), params, eps=1e-4) <= 1e-4


def test_lstm_is_causal():
    rng = np.random.default_rng(6)
    p = init_lstm(rng, 3, 4)
    x = rng.standard_normal((1, 6, 3))
    x2 = x.copy()
    x2[:, 4:] += 5.0
    a, b = F.lstm(Tensor(x), p).data, F.lstm(Tensor(x2), p).data
    assert np.array_equal(a[:, :4], b[:, :4]) and not np.allclose(a[:, 4:], b[:, 4:])


def test_time_reduce_concatenates_pairs():
    x = Tensor(np.arange(10.0).reshape(1, 5, 2))
    y = F.time_reduce(x, 2).data
    assert y.shape == (1, 3, 4)
    assert y[0, 0].tolist() == [0, 1, 2, 3] and y[0, 2].tolist() == [8, 9, 0, 0]


def test_embedding_gradient_accumulates_repeats():
    table = Tensor(np.zeros((4, 2)), requires_grad=True)
    F.embedding(table, np.array([1, 1, 3])).sum().backward()
    assert table.grad[:, 0].tolist() == [0, 2, 0, 1]
    with pytest.raises(IndexError):
        F.embedding(table, np.array([4]))


def test_cnn_gradients_and_shape():
    rng = np.random.default_rng(7)
    params = init_cnn(rng, 3, [2, 2, 2, 2], 27, [2, 3, 4], 3, 3, 4)
    # zero biases put all-zero patches exactly on the ReLU kink
    for c in params["convs"]:
        c["b"].data[:] = rng.uniform(-0.1, 0.1, c["b"].shape)
    x = Tensor(np.abs(rng.standard_normal((1, 3, 5, 27))), requires_grad=True)
    y = cnn_forward(x, params, [1, 1, 1, 2], [2, 3, 4], 3, 3)
    assert y.shape == (1, 5, 4)
    assert cnn_out_freq(257, 3, 3, 3) == 9
    w = rng.standard_normal(y.shape)
    leaves = [params["W"], params["b"]] + [t for c in params["convs"] for t in c.values()]
    assert finite_difference_check(lambda: (cnn_forward(x, params, [1, 1, 1, 2], [2, 3, 4], 3, 3) * w).sum(), leaves) <= 1e-4
