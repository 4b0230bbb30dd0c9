import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyclot import tensor as T
from dyclot.tensor import ConvSpec, ShapeError

from oracles import naive_conv2d, naive_depthwise


def test_tensor_validates_shape():
    assert T.tensor(range(6), shape=(2, 3)).shape == (2, 3)
    assert T.tensor([1.0]).dtype == np.float32
    with pytest.raises(ShapeError):
        T.tensor(range(5), shape=(2, 3))
    with pytest.raises(ShapeError):
        T.tensor(np.zeros((0, 3)))


@pytest.mark.parametrize("kernel, stride", [(0, 1), (5, 1), (3, 3)])
def test_conv_spec_rejects_unsupported(kernel, stride):
    with pytest.raises(ValueError):
        ConvSpec(kernel, stride)


def test_conv2d_all_ones():
    out = T.conv2d(np.ones((1, 1, 1, 2), np.float32), np.ones((3, 1, 1, 2), np.float32), ConvSpec(1))
    assert out.shape == (1, 1, 1, 3)
    assert np.all(out == 2.0)


def test_conv2d_identity_filter_bank():
    x = np.random.default_rng(0).standard_normal((2, 4, 4, 5)).astype(np.float32)
    w = np.eye(5, dtype=np.float32).reshape(5, 1, 1, 5)
    np.testing.assert_array_equal(T.conv2d(x, w, ConvSpec(1)), x)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_matches_naive_loops(stride):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 5, 5, 3)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    out = T.conv2d(x, w, ConvSpec(3, stride))
    np.testing.assert_allclose(out, naive_conv2d(x, w, stride), atol=1e-6, rtol=0)


def test_conv2d_shape_errors_name_axes():
    with pytest.raises(ShapeError, match=r"x\[3\]=3.*w\[3\]=2"):
        T.conv2d(np.zeros((1, 4, 4, 3)), np.zeros((2, 3, 3, 2)), ConvSpec(3))
    with pytest.raises(ShapeError, match="kernel"):
        T.conv2d(np.zeros((1, 4, 4, 3)), np.zeros((2, 1, 1, 3)), ConvSpec(3))


def test_pointwise_conv_is_per_position_affine():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 4, 6)).astype(np.float32)
    w = rng.standard_normal((5, 1, 1, 6)).astype(np.float32)
    conv = T.conv2d(x, w, ConvSpec(1))
    dense = T.affine(x.reshape(-1, 6), w.reshape(5, 6), np.zeros(5, np.float32)).reshape(2, 3, 4, 5)
    assert np.max(np.abs(conv - dense)) <= 1e-6


def test_depthwise_zero_and_delta_kernels():
    x = np.random.default_rng(3).standard_normal((2, 5, 5, 4)).astype(np.float32)
    assert np.all(T.depthwise_conv2d(x, np.zeros((4, 3, 3), np.float32), ConvSpec(3)) == 0)
    delta = np.zeros((4, 3, 3), np.float32)
    delta[:, 1, 1] = 1
    np.testing.assert_array_equal(T.depthwise_conv2d(x, delta, ConvSpec(3)), x)


def test_depthwise_stride2_matches_naive_loops():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 6, 6, 4)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3)).astype(np.float32)
    out = T.depthwise_conv2d(x, w, ConvSpec(3, 2))
    assert out.shape == (1, 3, 3, 4)
    np.testing.assert_allclose(out, naive_depthwise(x, w, 2), atol=1e-6, rtol=0)


def test_depthwise_channel_isolation():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 5, 5, 4)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3)).astype(np.float32)
    y = x.copy()
    y[..., [0, 2, 3]] += rng.standard_normal((1, 5, 5, 3)).astype(np.float32)
    a, b = T.depthwise_conv2d(x, w, ConvSpec(3)), T.depthwise_conv2d(y, w, ConvSpec(3))
    np.testing.assert_array_equal(a[..., 1], b[..., 1])


def test_depthwise_channel_mismatch():
    with pytest.raises(ShapeError):
        T.depthwise_conv2d(np.zeros((1, 4, 4, 3)), np.zeros((2, 3, 3)), ConvSpec(3))


def test_global_avg_pool():
    assert np.all(T.global_avg_pool(np.full((2, 3, 3, 4), 3.5, np.float32)) == 3.5)
    x = np.array([1, 2, 3, 4], np.float32).reshape(1, 2, 2, 1)
    assert T.global_avg_pool(x)[0, 0] == 2.5
    assert T.global_avg_pool(np.zeros((3, 8, 8, 256), np.float32)).shape == (3, 256)


def test_affine():
    v = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(T.affine(v, np.eye(2), np.zeros(2)), v)
    np.testing.assert_array_equal(T.affine(v, np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([0.0, 1.0])),
                                  [[3.0, 3.0]])
    assert T.affine(np.zeros((4, 256)), np.zeros((10, 256)), np.zeros(10)).shape == (4, 10)
    with pytest.raises(ShapeError):
        T.affine(np.zeros((1, 3)), np.zeros((2, 2)), np.zeros(2))


def test_activations():
    assert T.sigmoid(np.zeros(1))[0] == 0.5
    assert np.all(T.relu(-np.array([0.5, 3.0])) == 0)
    big = T.sigmoid(np.array([-1e4, 1e4], np.float64))
    assert np.all(np.isfinite(big))
    with pytest.raises(ValueError):
        T.activation(np.zeros(1), "tanh")


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=40, unique=True))
def test_sigmoid_is_monotone_and_open(values):
    v = np.array(sorted(values))
    s = T.sigmoid(v)
    assert np.all(np.diff(s) >= 0)
    assert np.all((s > 0) & (s < 1))


def test_concat_channels():
    a = np.zeros((1, 4, 4, 8), np.float32)
    b = np.ones((1, 4, 4, 8), np.float32)
    out = T.concat_channels(a, b)
    assert out.shape == (1, 4, 4, 16)
    assert np.all(out[..., :8] == 0) and np.all(out[..., 8:] == 1)
    with pytest.raises(ShapeError):
        T.concat_channels(a, np.zeros((1, 4, 4, 0), np.float32))
    with pytest.raises(ShapeError):
        T.concat_channels(a, np.zeros((1, 3, 4, 8), np.float32))


def test_replicate_channels_ordering():
    x = np.array([10.0, 20.0]).reshape(1, 1, 1, 2)
    np.testing.assert_array_equal(T.replicate_channels(x, 2).ravel(), [10, 20, 10, 20])
    np.testing.assert_array_equal(T.replicate_channels(x, 1), x)
    with pytest.raises(ValueError):
        T.replicate_channels(x, 0)


def test_replicate_slices_back_bit_exactly():
    x = np.random.default_rng(6).standard_normal((1, 4, 4, 3)).astype(np.float32)
    out = T.replicate_channels(x, 3)
    assert out.shape == (1, 4, 4, 9)
    for k in range(3):
        np.testing.assert_array_equal(out[..., 3 * k:3 * (k + 1)], x)


@settings(max_examples=25)
@given(st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_replicate_copies_sum_to_p_times_input(p, seed):
    x = np.random.default_rng(seed).integers(-50, 50, (2, 3, 3, 4)).astype(np.float32)
    out = T.replicate_channels(x, p)
    total = sum(out[..., k * 4:(k + 1) * 4] for k in range(p))
    np.testing.assert_array_equal(total, p * x)


def test_sample_norm_standardises_each_sample():
    x = np.random.default_rng(7).standard_normal((3, 4, 4, 5)) * 7 + 2
    y = T.sample_norm(x)
    np.testing.assert_allclose(y.mean(axis=(1, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=(1, 2, 3)), 1, atol=1e-6)
    assert np.all(T.sample_norm(np.full((1, 2, 2, 2), 4.0)) == 0)


def test_kernels_are_deterministic():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 6, 6, 4)).astype(np.float32)
    w = rng.standard_normal((3, 3, 3, 4)).astype(np.float32)
    a = T.conv2d(x, w, ConvSpec(3, 2))
    b = T.conv2d(x.copy(), w.copy(), ConvSpec(3, 2))
    assert a.tobytes() == b.tobytes()
