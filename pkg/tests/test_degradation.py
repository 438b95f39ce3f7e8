import numpy as np
import pytest
from hypothesis import given, strategies as st

from hsifusion.cube_io import HyperCube, SpectralResponse
from hsifusion.degradation import (DegradationConfig, apply_spectral_response, blur_decimate,
                                   gaussian_kernel, simulate_pair)
from hsifusion.errors import ValidationError

from oracles import blur_matrix, gaussian_2d, selection_matrix


def test_kernel_single_tap():
    assert gaussian_kernel(1, 3.0).tolist() == [[1.0]]


def test_kernel_3x3_values():
    k = gaussian_kernel(3, 0.5)
    # exp(-r^2 / 0.5) on the grid, divided by its sum 1.614603; the centre is
    # therefore 1 / 1.614603 = 0.619347
    assert k[1, 1] == pytest.approx(1 / 1.614603, abs=1e-6)
    assert k[1, 1] == pytest.approx(0.619347, abs=1e-5)
    assert k[0, 1] == pytest.approx(0.083822, abs=1e-5)
    assert k[0, 0] == pytest.approx(0.011344, abs=1e-5)
    raw = np.exp(-np.array([[2, 1, 2], [1, 0, 1], [2, 1, 2]]) / 0.5)
    assert raw.sum() == pytest.approx(1.614603, abs=1e-6)
    np.testing.assert_allclose(k, gaussian_2d(3, 0.5), atol=1e-15)


def test_kernel_sums_to_one():
    assert gaussian_kernel(7, 2.0).sum() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("size,sigma", [(4, 1.0), (3, 0.0), (3, -1.0)])
def test_kernel_rejects(size, sigma):
    with pytest.raises(ValidationError):
        gaussian_kernel(size, sigma)


def test_constant_cube_preserved():
    cube = HyperCube(np.full((2, 8, 8), 0.37))
    low = blur_decimate(cube, DegradationConfig())
    assert low.shape == (2, 2, 2)
    np.testing.assert_allclose(low.data, 0.37, rtol=0, atol=1e-15)


def _xbs(data, config):
    bands, h, w = data.shape
    k = gaussian_kernel(config.blur_kernel_size, config.blur_sigma)
    x = data.reshape(bands, h * w).astype(np.float64)
    # rows of X are band images; X B S with B the transposed blur operator
    b = blur_matrix(h, w, k).T
    s = selection_matrix(h, w, config.scale_factor)
    return (x @ b @ s).reshape(bands, h // config.scale_factor, w // config.scale_factor)


def test_ramp_matches_matrix_form():
    ramp = np.arange(64, dtype=np.float64).reshape(1, 8, 8)
    cfg = DegradationConfig(scale_factor=4)
    out = blur_decimate(HyperCube(ramp), cfg).data
    assert out.shape == (1, 2, 2)
    assert np.max(np.abs(out - _xbs(ramp, cfg))) < 1e-10


@given(st.integers(0, 2 ** 31), st.integers(1, 4), st.sampled_from([1, 2, 4]),
       st.sampled_from([1, 3, 5]), st.floats(0.3, 2.0))
def test_blur_decimate_equals_xbs(seed, bands, f, ksize, sigma):
    data = np.random.default_rng(seed).random((bands, 8, 8))
    cfg = DegradationConfig(ksize, sigma, f)
    assert np.max(np.abs(blur_decimate(HyperCube(data), cfg).data - _xbs(data, cfg))) < 1e-10


def test_indivisible_rejected():
    with pytest.raises(ValidationError):
        blur_decimate(HyperCube(np.zeros((1, 8, 8))), DegradationConfig(scale_factor=3))


def test_identity_response():
    data = np.random.default_rng(0).random((4, 3, 3))
    out = apply_spectral_response(HyperCube(data), SpectralResponse(np.eye(4)))
    np.testing.assert_array_equal(out.data, data)


def test_uniform_row_averages_bands():
    v = np.array([0.1, 0.4, 0.7, 1.0])
    cube = HyperCube(np.broadcast_to(v[:, None, None], (4, 2, 2)).copy())
    out = apply_spectral_response(cube, SpectralResponse(np.full((1, 4), 0.25)))
    np.testing.assert_allclose(out.data, v.mean(), atol=1e-15)


def test_random_response_matches_mode3_product():
    rng = np.random.default_rng(7)
    data = rng.random((31, 2, 2))
    r = SpectralResponse.from_matrix(rng.random((3, 31)))
    out = apply_spectral_response(HyperCube(data), r).data
    # unfold to S x (HW), multiply, refold
    dense = (r.weights @ data.reshape(31, 4)).reshape(3, 2, 2)
    assert np.max(np.abs(out - dense)) < 1e-12


@given(st.integers(0, 2 ** 31), st.floats(-3, 3), st.floats(-3, 3))
def test_response_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.random((5, 3, 4)), rng.random((5, 3, 4))
    r = SpectralResponse.from_matrix(rng.random((2, 5)))
    lhs = apply_spectral_response(HyperCube(a * x + b * y), r).data
    rhs = (a * apply_spectral_response(HyperCube(x), r).data
           + b * apply_spectral_response(HyperCube(y), r).data)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_band_mismatch():
    with pytest.raises(ValidationError):
        apply_spectral_response(HyperCube(np.zeros((3, 2, 2))), SpectralResponse(np.eye(4)))


def test_simulate_pair_shapes():
    hr = HyperCube(np.random.default_rng(0).random((31, 64, 64)).astype(np.float32),
                   np.linspace(400, 700, 31))
    r = SpectralResponse.from_matrix(np.random.default_rng(1).random((3, 31)))
    lr, msi = simulate_pair(hr, r, DegradationConfig())
    assert lr.shape == (16, 16, 31)
    assert msi.shape == (64, 64, 3)
    np.testing.assert_array_equal(lr.wavelengths, hr.wavelengths)
    assert np.all((msi.wavelengths > 400) & (msi.wavelengths < 700))


def test_simulate_pair_identity():
    hr = HyperCube(np.random.default_rng(2).random((3, 5, 5)))
    lr, msi = simulate_pair(hr, SpectralResponse(np.eye(3)), DegradationConfig(1, 1.0, 1))
    np.testing.assert_array_equal(lr.data, hr.data)
    np.testing.assert_array_equal(msi.data, hr.data)


@given(st.floats(0, 1), st.integers(1, 6))
def test_constant_cube_constant_pair(c, bands):
    hr = HyperCube(np.full((bands, 8, 8), c))
    r = SpectralResponse.from_matrix(np.random.default_rng(bands).random((2, bands)))
    lr, msi = simulate_pair(hr, r, DegradationConfig(scale_factor=2))
    np.testing.assert_allclose(lr.data, c, atol=1e-14)
    np.testing.assert_allclose(msi.data, c, atol=1e-14)
