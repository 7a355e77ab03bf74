import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egoforecast import tensor as tc
from egoforecast.errors import DimensionError, UsageError


def naive_conv1d(x, w, b, pad):
    n, c_in, length = x.shape
    c_out, _, k = w.shape
    xp = np.zeros((n, c_in, length + 2 * pad))
    xp[:, :, pad:pad + length] = x
    l_out = length + 2 * pad - k + 1
    out = np.zeros((n, c_out, l_out))
    for i in range(n):
        for o in range(c_out):
            for t in range(l_out):
                out[i, o, t] = b[o] + sum(xp[i, c, t + j] * w[o, c, j]
                                          for c in range(c_in) for j in range(k))
    return out


def naive_deconv1d(x, w, b):
    n, c_in, length = x.shape
    _, c_out, k = w.shape
    out = np.zeros((n, c_out, length + k - 1)) + b[None, :, None]
    for i in range(n):
        for c in range(c_in):
            for o in range(c_out):
                for t in range(length):
                    for j in range(k):
                        out[i, o, t + j] += x[i, c, t] * w[c, o, j]
    return out


# --- conv1d ---------------------------------------------------------------

def test_conv1d_table_shape():
    rng = np.random.default_rng(0)
    out = tc.conv1d(rng.standard_normal((1, 3, 10)), rng.standard_normal((32, 3, 3)), np.zeros(32))
    assert out.shape == (1, 32, 8)


def test_conv1d_padding_keeps_length():
    rng = np.random.default_rng(1)
    out = tc.conv1d(rng.standard_normal((1, 32, 6)), rng.standard_normal((64, 32, 3)), np.zeros(64), 1)
    assert out.shape == (1, 64, 6)


def test_conv1d_zero_input_gives_bias():
    b = np.array([0.5, -2.0, 3.0])
    out = tc.conv1d(np.zeros((2, 4, 7)), np.ones((3, 4, 3)), b)
    assert np.array_equal(out.data, np.broadcast_to(b[None, :, None], (2, 3, 5)))


@pytest.mark.parametrize("pad", [0, 1, 2])
def test_conv1d_matches_loop_oracle(pad):
    rng = np.random.default_rng(pad)
    x, w, b = rng.standard_normal((2, 3, 6)), rng.standard_normal((4, 3, 3)), rng.standard_normal(4)
    assert np.allclose(tc.conv1d(x, w, b, pad).data, naive_conv1d(x, w, b, pad), atol=1e-12)


def test_conv1d_channel_mismatch():
    with pytest.raises(DimensionError):
        tc.conv1d(np.zeros((1, 3, 10)), np.zeros((8, 4, 3)), np.zeros(8))


def test_conv1d_too_short():
    with pytest.raises(DimensionError):
        tc.conv1d(np.zeros((1, 3, 2)), np.zeros((8, 3, 3)), np.zeros(8))


# --- deconv1d -------------------------------------------------------------

def test_deconv1d_table_length():
    out = tc.deconv1d(np.ones((1, 256, 2)), np.zeros((256, 256, 3)), np.zeros(256))
    assert out.shape == (1, 256, 4)


def test_deconv1d_kernel_chain_lengths():
    h = np.ones((1, 4, 2))
    lengths = []
    for k in (3, 5, 7, 7):
        h = tc.deconv1d(h, np.ones((4, 4, k)) * 0.01, np.zeros(4)).data
        lengths.append(h.shape[2])
    assert lengths == [4, 8, 14, 20]


def test_deconv1d_single_element_spreads():
    out = tc.deconv1d(np.array([[[2.0]]]), np.ones((1, 1, 3)), np.zeros(1))
    assert np.array_equal(out.data, [[[2.0, 2.0, 2.0]]])


def test_deconv1d_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x, w, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((3, 5, 3)), rng.standard_normal(5)
    assert np.allclose(tc.deconv1d(x, w, b).data, naive_deconv1d(x, w, b), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(1, 5),
       st.integers(0, 2**31 - 1))
def test_deconv_is_adjoint_of_conv(n, c_in, c_out, length, k, seed):
    # <conv(y, w), x> == <y, deconv(x, w)> for w read as [C_in_deconv, C_out_deconv, K]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c_in, length))
    y = rng.standard_normal((n, c_out, length + k - 1))
    w = rng.standard_normal((c_in, c_out, k))
    lhs = (tc.conv1d(y, w, np.zeros(c_in)).data * x).sum()
    rhs = (y * tc.deconv1d(x, w, np.zeros(c_out)).data).sum()
    assert np.isclose(lhs, rhs, rtol=1e-10, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_is_linear_in_input(seed, a, c):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.standard_normal((2, 3, 7)), rng.standard_normal((2, 3, 7))
    w, zero = rng.standard_normal((4, 3, 3)), np.zeros(4)
    lhs = tc.conv1d(a * x1 + c * x2, w, zero).data
    rhs = a * tc.conv1d(x1, w, zero).data + c * tc.conv1d(x2, w, zero).data
    assert np.allclose(lhs, rhs, atol=1e-9)


# --- batch norm -----------------------------------------------------------

def test_batchnorm_train_standardizes():
    rng = np.random.default_rng(4)
    bn = tc.BatchNorm("bn", 5)
    y = tc.batchnorm1d(rng.standard_normal((8, 5, 6)) * 3 + 7, bn).data
    assert np.allclose(y.mean(axis=(0, 2)), 0, atol=1e-6)
    assert np.allclose(y.var(axis=(0, 2)), 1, atol=1e-6)


def test_batchnorm_eval_identity_statistics():
    x = np.random.default_rng(5).standard_normal((3, 4, 5))
    bn = tc.BatchNorm("bn", 4)
    bn.mode = "eval"
    y = tc.batchnorm1d(x, bn).data
    assert np.allclose(y, x / np.sqrt(1 + tc.BN_EPS), atol=1e-15)


def test_batchnorm_constant_channel_gives_beta():
    bn = tc.BatchNorm("bn", 2)
    bn.beta.tensor.data[:] = [0.25, -1.5]
    x = np.full((4, 2, 3), 9.0)
    y = tc.batchnorm1d(x, bn).data
    assert np.allclose(y[:, 0], 0.25) and np.allclose(y[:, 1], -1.5)


def test_batchnorm_running_stats_update():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 3, 5)) * 2 + 1
    bn = tc.BatchNorm("bn", 3)
    tc.batchnorm1d(x, bn)
    flat = x.transpose(1, 0, 2).reshape(3, -1)
    assert np.allclose(bn.running_mean, 0.1 * flat.mean(axis=1))
    assert np.allclose(bn.running_var, 0.9 + 0.1 * flat.var(axis=1, ddof=1))


def test_batchnorm_channel_mismatch():
    with pytest.raises(DimensionError):
        tc.batchnorm1d(np.zeros((2, 3, 4)), tc.BatchNorm("bn", 4))


# --- relu / concat / mse / sum --------------------------------------------

def test_relu_values():
    assert np.array_equal(tc.relu(np.array([[[-1.0, 0.0, 2.0]]])).data, [[[0.0, 0.0, 2.0]]])


def test_relu_negative_input_zero_grad():
    x = tc.Tensor(-np.ones((1, 2, 3)), requires_grad=True)
    out = tc.relu(x)
    tc.tensor_sum(out).backward()
    assert not out.data.any() and not x.grad.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_relu_idempotent(seed):
    x = np.random.default_rng(seed).standard_normal((2, 3, 4))
    assert np.array_equal(tc.relu(tc.relu(x)).data, tc.relu(x).data)


def test_concat_shapes():
    parts = [np.ones((1, 128, 2))] * 3
    assert tc.concat_channels(parts).shape == (1, 384, 2)
    assert tc.concat_channels(parts[:2]).shape == (1, 256, 2)
    x = np.arange(6.0).reshape(1, 2, 3)
    assert np.array_equal(tc.concat_channels([x]).data, x)


def test_concat_length_mismatch():
    with pytest.raises(DimensionError):
        tc.concat_channels([np.ones((1, 2, 3)), np.ones((1, 2, 4))])


def test_mse_values():
    assert tc.mse_loss(np.ones(3), np.ones(3)).data == 0.0
    assert tc.mse_loss(np.array([0.0, 0.0]), np.array([3.0, 4.0])).data == 12.5


def test_mse_gradient_closed_form():
    rng = np.random.default_rng(7)
    p = tc.Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    t = rng.standard_normal((2, 3, 4))
    tc.mse_loss(p, t).backward()
    assert np.allclose(p.grad, 2 * (p.data - t) / p.size, atol=1e-15)


def test_sum_gradient_all_ones():
    x = tc.Tensor(np.arange(5.0), requires_grad=True)
    tc.tensor_sum(x).backward()
    assert np.array_equal(x.grad, np.ones(5))


def test_backward_on_non_scalar_raises():
    x = tc.Tensor(np.ones((1, 1, 3)), requires_grad=True)
    with pytest.raises(UsageError):
        tc.relu(x).backward()


def test_repeated_backward_identical():
    rng = np.random.default_rng(8)
    w = tc.Tensor(rng.standard_normal((3, 2, 3)), requires_grad=True)
    x = rng.standard_normal((2, 2, 6))
    grads = []
    for _ in range(2):
        w.zero_grad()
        tc.tensor_sum(tc.relu(tc.conv1d(x, w, np.zeros(3)))).backward()
        grads.append(w.grad.copy())
    assert np.array_equal(grads[0], grads[1])


def test_shared_input_grads_accumulate():
    x = tc.Tensor(np.array([[[1.0, 2.0]]]), requires_grad=True)
    tc.tensor_sum(tc.concat_channels([x, x])).backward()
    assert np.array_equal(x.grad, [[[2.0, 2.0]]])


def test_no_grad_records_nothing():
    w = tc.Tensor(np.ones((1, 1, 1)), requires_grad=True)
    with tc.no_grad():
        out = tc.conv1d(np.ones((1, 1, 2)), w, np.zeros(1))
    assert not out.requires_grad


# --- adam -----------------------------------------------------------------

def test_adam_quadratic_converges():
    p = tc.Parameter("w", np.array([0.0]))
    for _ in range(500):
        p.tensor.grad = 2 * (p.data - 3.0)
        tc.adam_step([p], 0.1)
    assert abs(p.data[0] - 3.0) < 1e-3


def test_adam_first_step_is_lr_times_sign():
    p = tc.Parameter("w", np.array([1.0, 1.0, 1.0]))
    p.tensor.grad = np.array([5.0, -0.3, 40.0])
    tc.adam_step([p], 0.01)
    assert np.allclose(p.data, 1.0 - 0.01 * np.sign([5.0, -0.3, 40.0]), atol=1e-8)


def test_adam_zero_gradient_leaves_parameter():
    p = tc.Parameter("w", np.array([1.5, -2.0]))
    p.tensor.grad = np.zeros(2)
    tc.adam_step([p], 0.1)
    assert np.array_equal(p.data, [1.5, -2.0])


def test_adam_missing_grad_raises():
    with pytest.raises(UsageError):
        tc.adam_step([tc.Parameter("w", np.zeros(2))], 0.1)


# --- gradcheck ------------------------------------------------------------

def test_gradcheck_single_conv():
    rng = np.random.default_rng(9)
    w = tc.Tensor(rng.standard_normal((4, 3, 3)), requires_grad=True)
    b = tc.Tensor(rng.standard_normal(4), requires_grad=True)
    rep = tc.gradcheck(lambda xs: tc.conv1d(xs[0], w, b, 1), [(2, 3, 5)], [w, b])
    assert rep.passed and rep.max_rel_error < 1e-4


def test_gradcheck_relu_away_from_kink_exact():
    rng = np.random.default_rng(10)
    x = rng.uniform(0.1, 1, (2, 3, 4)) * rng.choice([-1, 1], (2, 3, 4))
    rep = tc.gradcheck(lambda xs: tc.relu(xs[0]), [x])
    assert rep.max_rel_error < 1e-7 and rep.skipped_kinks == 0


def test_gradcheck_skips_kink_crossings():
    x = np.array([[[1e-7, -1e-7, 0.5]]])
    rep = tc.gradcheck(lambda xs: tc.relu(xs[0]), [x])
    assert rep.skipped_kinks == 2 and rep.checked == 1


@pytest.mark.parametrize("op", ["conv1d", "deconv1d", "batchnorm1d", "relu", "concat", "mse"])
def test_gradcheck_catches_injected_fault(op):
    from egoforecast.selftest import layer_cases

    cases = [c for c in layer_cases(0) if c[0].startswith(op)]
    with tc.inject_grad_fault(op, magnitude=1e-2):
        errs = [tc.gradcheck(f, i, p).max_rel_error for _, f, i, p in cases]
    assert max(errs) > 1e-4
