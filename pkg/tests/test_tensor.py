import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volnet import tensor as tc
from conftest import direct_conv3d


def test_constant_input_all_ones_kernel():
    x = np.ones((1, 3, 3, 3))
    w = np.ones((1, 1, 3, 3, 3))
    y = tc.conv3d_full(x, w)
    assert y[0, 1, 1, 1] == 27
    assert y[0, 0, 0, 0] == 8
    assert y[0, 0, 1, 1] == 18


@pytest.mark.parametrize("S,T,k", [(1, 8, (3, 3, 3)), (3, 2, (3, 1, 5)), (6, 4, (3, 3, 3)), (16, 4, (5, 3, 3))])
def test_conv3d_full_matches_direct_sum(rng, S, T, k):
    # the small cases take the im2col path, the wide ones the per-tap path
    x = rng.standard_normal((S, 7, 6, 5))
    w = rng.standard_normal((T, S) + k)
    np.testing.assert_allclose(tc.conv3d_full(x, w), direct_conv3d(x, w), rtol=1e-12, atol=1e-12)


def test_convolution_is_flipped(rng):
    # a unit impulse reproduces the kernel unflipped around the impulse
    x = np.zeros((1, 5, 5, 5))
    x[0, 2, 2, 2] = 1.0
    w = rng.standard_normal((1, 1, 3, 3, 3))
    y = tc.conv3d_full(x, w)
    np.testing.assert_array_equal(y[0, 1:4, 1:4, 1:4], w[0, 0])


def test_padding_neutrality_on_interior(rng):
    w = rng.uniform(size=(1, 1, 3, 3, 3))
    y = tc.conv3d_full(np.full((1, 6, 6, 6), 2.0), w)
    np.testing.assert_allclose(y[0, 1:-1, 1:-1, 1:-1], 2.0 * w.sum())


def test_batch_axis_matches_loop(rng):
    x = rng.standard_normal((3, 2, 5, 5, 5))
    w = rng.standard_normal((4, 2, 3, 3, 3))
    y = tc.conv3d_full(x, w)
    for i in range(3):
        np.testing.assert_allclose(y[i], tc.conv3d_full(x[i], w), atol=1e-12)


def test_depthwise_equals_diagonal_full(rng):
    x = rng.standard_normal((3, 5, 6, 4))
    w = rng.standard_normal((3, 3, 3, 3))
    full = np.zeros((3, 3, 3, 3, 3))
    for c in range(3):
        full[c, c] = w[c]
    np.testing.assert_allclose(tc.conv3d_depthwise(x, w), tc.conv3d_full(x, full), atol=1e-12)


@pytest.mark.parametrize("axis", [0, 1, 2, "X", "y"])
def test_axis_conv_equals_embedded_full(rng, axis):
    ax = tc.AXES[axis.upper()] if isinstance(axis, str) else axis
    x = rng.standard_normal((3, 5, 6, 7))
    w = rng.standard_normal((2, 3, 5))
    shape = [1, 1, 1]
    shape[ax] = 5
    full = w.reshape((2, 3) + tuple(shape))
    np.testing.assert_allclose(tc.conv_axis(x, w, axis), tc.conv3d_full(x, full), atol=1e-12)


def test_depthwise_axis_conv(rng):
    x = rng.standard_normal((3, 5, 6, 7))
    w = rng.standard_normal((3, 3))
    y = tc.conv_axis(x, w, 2, depthwise=True)
    for c in range(3):
        ref = tc.conv_axis(x[c:c + 1], w[c:c + 1][None], 2)
        np.testing.assert_allclose(y[c:c + 1], ref, atol=1e-12)


def test_pointwise_is_channel_matmul(rng):
    x = rng.standard_normal((4, 3, 3, 2))
    w = rng.standard_normal((5, 4))
    np.testing.assert_allclose(tc.pointwise(x, w), np.einsum("ts,sxyz->txyz", w, x), atol=1e-12)


def test_float32_stays_float32(rng):
    x = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32)
    assert tc.conv3d_full(x, w).dtype == np.float32


@pytest.mark.parametrize("call", [
    lambda: tc.conv3d_full(np.zeros((2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3))),
    lambda: tc.conv3d_full(np.zeros((1, 4, 4, 4)), np.zeros((1, 1, 2, 3, 3))),
    lambda: tc.conv_axis(np.zeros((2, 4, 4, 4)), np.zeros((1, 2, 4)), 0),
    lambda: tc.conv_axis(np.zeros((2, 4, 4, 4)), np.zeros((1, 2, 3)), 3),
    lambda: tc.pointwise(np.zeros((2, 4, 4, 4)), np.zeros((3, 3))),
    lambda: tc.add(np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 2, 3))),
    lambda: tc.voxel_shuffle(np.zeros((7, 2, 2, 2)), 2),
    lambda: tc.concat_channels([]),
])
def test_shape_errors(call):
    with pytest.raises(tc.ShapeError):
        call()


def test_relu_and_concat_split(rng):
    x = rng.standard_normal((2, 3, 3, 3))
    assert np.all(tc.relu(x) >= 0)
    a, b = rng.standard_normal((2, 3, 3, 3)), rng.standard_normal((3, 3, 3, 3))
    c = tc.concat_channels([a, b])
    assert c.shape == (5, 3, 3, 3)
    a2, b2 = tc.split_channels(c, [2, 3])
    np.testing.assert_array_equal(a2, a)
    np.testing.assert_array_equal(b2, b)


def test_voxel_shuffle_index_formula(rng):
    r, C = 2, 2
    x = rng.standard_normal((C * r ** 3, 3, 4, 2))
    y = tc.voxel_shuffle(x, r)
    assert y.shape == (C, 6, 8, 4)
    for c in range(C):
        for dx in range(r):
            for dy in range(r):
                for dz in range(r):
                    src = x[c * r ** 3 + dx * r * r + dy * r + dz]
                    np.testing.assert_array_equal(y[c, dx::r, dy::r, dz::r], src)


def test_voxel_shuffle_scale_three(rng):
    x = rng.standard_normal((27, 2, 2, 2))
    y = tc.voxel_shuffle(x, 3)
    assert y.shape == (1, 6, 6, 6)
    assert y[0, 4, 2, 5] == x[1 * 9 + 2 * 3 + 2, 1, 0, 1]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 2), st.tuples(*[st.integers(1, 4)] * 3), st.integers(0, 2 ** 31))
def test_voxel_shuffle_is_a_permutation(r, c, dims, seed):
    x = np.random.default_rng(seed).standard_normal((c * r ** 3,) + dims)
    y = tc.voxel_shuffle(x, r)
    np.testing.assert_array_equal(tc.voxel_unshuffle(y, r), x)
    np.testing.assert_array_equal(np.sort(y, axis=None), np.sort(x, axis=None))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 3, 5]), st.integers(0, 2 ** 31))
def test_conv_is_linear(S, T, k, seed):
    g = np.random.default_rng(seed)
    x1, x2 = g.standard_normal((2, S, 4, 5, 3))
    w = g.standard_normal((T, S, k, k, k))
    lhs = tc.conv3d_full(2.0 * x1 - x2, w)
    rhs = 2.0 * tc.conv3d_full(x1, w) - tc.conv3d_full(x2, w)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_shift_equivariance_away_from_faces(seed):
    g = np.random.default_rng(seed)
    x = np.zeros((2, 12, 12, 12))
    x[:, 3:7, 3:7, 3:7] = g.standard_normal((2, 4, 4, 4))
    w = g.standard_normal((3, 2, 3, 3, 3))
    shifted = np.roll(x, 1, axis=1)
    np.testing.assert_allclose(np.roll(tc.conv3d_full(x, w), 1, axis=1), tc.conv3d_full(shifted, w),
                               atol=1e-12)


def test_vjp_unknown_op():
    with pytest.raises(ValueError):
        tc.vjp("nope", (), np.zeros(1))


def test_vjp_needs_skips_gradients(rng):
    x = rng.standard_normal((2, 4, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    g = rng.standard_normal((3, 4, 4, 4))
    gx, gw = tc.vjp("conv3d_full", (x, w), g, needs=(False, True))
    assert gx is None and gw.shape == w.shape
