import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hsifusion import filters
from hsifusion.errors import ValidationError
from hsifusion.filters import FilterConfig, InterleaveSpec

from oracles import box_mean_window


def test_constant_preserved_bitwise():
    x = np.full((1, 2, 7, 9), 0.1)
    np.testing.assert_array_equal(filters.box_lowpass(x), x)
    assert not filters.highpass(x).any()


def test_window_mean_oracle_interior():
    img = np.arange(144, dtype=np.float64).reshape(12, 12) * 1.37 + 0.01
    lp = filters.box_lowpass(img[None, None])[0, 0]
    for i in range(3, 10):
        for j in range(3, 10):
            assert lp[i, j] == pytest.approx(box_mean_window(img, i, j, 6), abs=1e-12)


@pytest.mark.parametrize("k", [2, 3, 5, 6])
def test_window_mean_oracle_everywhere(k, rng):
    img = rng.random((7, 8))
    lp = filters.box_lowpass(img[None, None], FilterConfig(k))[0, 0]
    want = np.array([[box_mean_window(img, i, j, k) for j in range(8)] for i in range(7)])
    np.testing.assert_allclose(lp, want, atol=1e-13)


def test_size_one_identity(rng):
    x = rng.random((1, 1, 4, 4))
    np.testing.assert_array_equal(filters.box_lowpass(x, FilterConfig(1)), x)


def test_checkerboard_size2_highpass_interior():
    i, j = np.mgrid[0:8, 0:8]
    board = np.where((i + j) % 2 == 0, 1.0, -1.0)[None, None]
    hp = filters.highpass(board, FilterConfig(2))
    # the border rows/cols use replicated samples, so only the interior is zero-mean
    np.testing.assert_array_equal(hp[..., 1:, 1:], board[..., 1:, 1:])


def test_reassembly_exact_on_unit_interval(rng):
    x = rng.random((2, 3, 16, 16))
    lp = filters.box_lowpass(x)
    hp = filters.highpass(x)
    np.testing.assert_array_equal(lp + hp, x)


@given(arrays(np.float64, (1, 2, 6, 7), elements=st.floats(-1e3, 1e3)))
def test_reassembly_within_rounding(x):
    lp, hp = filters.box_lowpass(x), filters.highpass(x)
    scale = np.maximum(np.abs(x), np.abs(lp))
    assert np.all(np.abs(lp + hp - x) <= 2 * np.spacing(scale) + 1e-300)


@given(st.floats(-1e6, 1e6), st.integers(1, 8))
def test_highpass_of_constant_is_zero(c, k):
    x = np.full((1, 1, 5, 6), c)
    assert not filters.highpass(x, FilterConfig(k)).any()


def test_lowpass_backward_is_adjoint(rng):
    x = rng.standard_normal((2, 2, 7, 5))
    g = rng.standard_normal(x.shape)
    for k in (1, 2, 3, 6):
        cfg = FilterConfig(k)
        lhs = np.sum(filters.box_lowpass(x, cfg) * g)
        rhs = np.sum(x * filters.box_lowpass_backward(g, cfg))
        assert abs(lhs - rhs) < 1e-10


def test_default_positions():
    assert filters.default_positions(31, 3) == (0, 17, 33)
    assert filters.default_positions(64, 3) == (0, 33, 66)


def test_build_c0_layout(rng):
    y = rng.standard_normal((1, 31, 4, 4))
    z = rng.standard_normal((1, 3, 4, 4))
    c0 = filters.build_c0(y, z)
    assert c0.shape == (1, 34, 4, 4)
    for k, p in enumerate((0, 17, 33)):
        np.testing.assert_array_equal(c0[:, p], z[:, k])
    rest = [i for i in range(34) if i not in (0, 17, 33)]
    np.testing.assert_array_equal(c0[:, rest], y)


def test_build_c1_layout(rng):
    u = rng.standard_normal((1, 64, 2, 2))
    z = rng.standard_normal((1, 3, 2, 2))
    c1 = filters.build_c1(u, z)
    assert c1.shape[1] == 67
    np.testing.assert_array_equal(c1[:, [0, 33, 66]], z)


def test_no_msi_bands_is_identity(rng):
    y = rng.standard_normal((1, 5, 3, 3))
    np.testing.assert_array_equal(filters.build_c0(y, np.zeros((1, 0, 3, 3))), y)
    np.testing.assert_array_equal(filters.build_c1(y, np.zeros((1, 0, 3, 3))), y)


def test_interleave_errors(rng):
    y, z = rng.standard_normal((1, 4, 2, 2)), rng.standard_normal((1, 2, 2, 2))
    with pytest.raises(ValidationError):
        filters.build_c0(y, z, InterleaveSpec((0, 6)))
    with pytest.raises(ValidationError):
        filters.build_c0(y, z, InterleaveSpec((3, 1)))
    with pytest.raises(ValidationError):
        filters.build_c0(y, z, InterleaveSpec((0,)))
    with pytest.raises(ValidationError):
        filters.build_c0(y, rng.standard_normal((1, 2, 3, 2)))


@given(st.integers(0, 2 ** 31), st.integers(1, 10), st.integers(0, 5))
def test_interleave_is_channel_permutation(seed, base, extra):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((2, base, 3, 3))
    z = rng.standard_normal((2, extra, 3, 3))
    c = filters.build_c0(y, z)
    planes = sorted(c[0, i].tobytes() for i in range(base + extra))
    want = sorted([y[0, i].tobytes() for i in range(base)] + [z[0, i].tobytes() for i in range(extra)])
    assert planes == want
    gy, gz = filters.split_interleaved(c, extra)
    np.testing.assert_array_equal(gy, y)
    np.testing.assert_array_equal(gz, z)
