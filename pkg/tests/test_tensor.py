import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lowbridge import tensor as T
from lowbridge.tensor import Tensor, backward
from tests import gradcases
from tests.helpers import GRAD_RTOL, conv2d_direct, gradcheck, softmax_scalar


@pytest.fixture
def rng():
    return np.random.default_rng(7)


# ---- conv2d -----------------------------------------------------------------


def test_conv_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.dims == [1, 1, 1, 1]
    assert out.item() == 9.0


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(2, 1, 6, 5)).astype(np.float32)
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1
    out = T.conv2d(Tensor(x), Tensor(w), padding=1)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("size,stride,padding", [(8, 1, 0), (8, 1, 1), (9, 2, 1)])
def test_conv_matches_direct_loops(rng, size, stride, padding):
    x = rng.normal(size=(2, 3, size, size))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x, dtype=np.float32), Tensor(w, dtype=np.float32), Tensor(b, dtype=np.float32), stride, padding)
    np.testing.assert_allclose(out.data, conv2d_direct(x, w, b, stride, padding), atol=1e-5)


def test_conv_channel_mismatch_names_dimension():
    with pytest.raises(ValueError, match="channel"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_rejects_non_4d():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))


# ---- pooling and upsampling ---------------------------------------------------


def test_pool_picks_max():
    out = T.pool_max2x2(Tensor(np.array([[[[1, 2], [3, 4]]]], np.float32)))
    assert out.data.ravel().tolist() == [4.0]


def test_pool_constant_halves():
    out = T.pool_max2x2(Tensor(np.full((1, 2, 6, 4), 0.3, np.float32)))
    assert out.dims == [1, 2, 3, 2]
    assert np.all(out.data == np.float32(0.3))


def test_pool_matches_window_scan(rng):
    x = rng.normal(size=(1, 1, 6, 6)).astype(np.float32)
    expect = np.array([[max(x[0, 0, 2 * i + a, 2 * j + b] for a in (0, 1) for b in (0, 1)) for j in range(3)] for i in range(3)])
    np.testing.assert_array_equal(T.pool_max2x2(Tensor(x)).data[0, 0], expect)


def test_pool_odd_size_rejected():
    with pytest.raises(ValueError):
        T.pool_max2x2(Tensor(np.zeros((1, 1, 5, 4))))


def test_upsample_single():
    out = T.upsample_nearest2x(Tensor(np.array([[[[5.0]]]])))
    assert out.data[0, 0].tolist() == [[5.0, 5.0], [5.0, 5.0]]


def test_down_up_constant_identity():
    x = np.full((1, 1, 8, 8), 2.5, np.float32)
    np.testing.assert_array_equal(T.upsample_nearest2x(T.pool_max2x2(Tensor(x))).data, x)


def test_upsample_backward_is_block_sum(rng):
    x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    g = rng.normal(size=(1, 2, 6, 6)).astype(np.float32)
    backward(T.tsum(T.upsample_nearest2x(x) * Tensor(g)))
    expect = g.reshape(1, 2, 3, 2, 3, 2).sum(axis=(3, 5))
    np.testing.assert_allclose(x.grad, expect, rtol=1e-5)


# ---- normalization and pointwise --------------------------------------------


def test_instance_norm_constant_channel_is_zero():
    x = Tensor(np.full((1, 1, 4, 4), 3.0))
    out = T.instance_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)))
    assert np.all(out.data == 0.0)


def test_instance_norm_two_values():
    x = Tensor(np.array([[[[0.0, 2.0]]]]), dtype=np.float64)
    out = T.instance_norm(x, Tensor(np.ones(1), dtype=np.float64), Tensor(np.zeros(1), dtype=np.float64), eps=1e-12)
    np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-9)


def test_relu_and_sigmoid_values():
    assert T.relu(Tensor(np.array([-1.0, 2.0]))).data.tolist() == [0.0, 2.0]
    assert T.sigmoid(Tensor(np.array([0.0]))).item() == 0.5


def test_sigmoid_extremes_finite():
    out = T.sigmoid(Tensor(np.array([-1000.0, 1000.0])))
    assert out.data.tolist() == [0.0, 1.0]


def test_concat_matches_slices(rng):
    a = rng.normal(size=(2, 2, 3, 3)).astype(np.float32)
    b = rng.normal(size=(2, 3, 3, 3)).astype(np.float32)
    out = T.concat_channels(Tensor(a), Tensor(b)).data
    assert out.shape[1] == 5
    np.testing.assert_array_equal(out[:, :2], a)
    np.testing.assert_array_equal(out[:, 2:], b)


def test_concat_spatial_mismatch():
    with pytest.raises(ValueError):
        T.concat_channels(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 2))))


def test_elementwise_dims_mismatch():
    with pytest.raises(ValueError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


# ---- softmax --------------------------------------------------------------------


def test_softmax_uniform():
    out = T.softmax_channels(Tensor(np.zeros((1, 4, 2, 2))))
    assert np.all(out.data == np.float32(0.25))


def test_softmax_no_overflow():
    out = T.softmax_channels(Tensor(np.array([1000.0, 0.0]).reshape(1, 2, 1, 1)))
    assert np.isfinite(out.data).all()
    assert out.data.ravel()[0] == pytest.approx(1.0)
    assert out.data.ravel()[1] == pytest.approx(0.0, abs=1e-30)


def test_softmax_matches_scalar_oracle(rng):
    z = rng.normal(scale=3, size=(2, 4, 3, 3))
    out = T.softmax_channels(Tensor(z, dtype=np.float64)).data
    np.testing.assert_allclose(out, softmax_scalar(z), atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (1, 3, 2, 2), elements=st.floats(-50, 50)))
def test_softmax_is_distribution(z):
    p = T.softmax_channels(Tensor(z, dtype=np.float64)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)
    at_max = np.take_along_axis(p, z.argmax(axis=1)[:, None], axis=1)[:, 0]
    np.testing.assert_array_equal(at_max, p.max(axis=1))


# ---- autodiff engine ---------------------------------------------------------


def test_linear_gradient():
    x = np.array([1.5, -2.0, 0.25])
    w = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
    backward(T.tsum(w * Tensor(x, dtype=np.float64)))
    np.testing.assert_array_equal(w.grad, x)


def test_square_gradient():
    w = Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
    backward(T.tsum(w * w))
    assert w.grad.tolist() == [6.0]


def test_shared_subexpression_accumulates():
    w = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
    y = w * w
    backward(T.tsum(y + y * 3.0))
    assert w.grad.tolist() == [16.0]


def test_backward_requires_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(w * 2.0)


def test_no_grad_builds_no_graph():
    w = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = w * 2.0
    assert y.is_leaf and not y.requires_grad


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_raises_on_nan():
    T.set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            T.div(Tensor(np.zeros(2)), Tensor(np.zeros(2)))
    finally:
        T.set_debug(False)


def test_dtype_follows_input():
    assert Tensor(np.zeros(2)).dtype == np.float64
    assert Tensor([0.0, 1.0]).dtype == np.float32


# ---- finite-difference harness -----------------------------------------------------


@pytest.mark.parametrize("name", gradcases.NAMES)
def test_gradients_match_finite_differences(name):
    worst = max(gradcheck(*gradcases.instance(name, k)) for k in range(gradcases.INSTANCES))
    assert worst < GRAD_RTOL
