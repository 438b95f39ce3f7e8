"""Observation model: blurred, decimated LR-HSI and spectrally projected HR-MSI."""

from dataclasses import dataclass

import numpy as np

from .cube_io import HyperCube
from .errors import ValidationError


@dataclass(frozen=True)
class DegradationConfig:
    blur_kernel_size: int = 3
    blur_sigma: float = 0.5
    scale_factor: int = 4
    border_mode: str = "replicate"

    def validate(self):
        if self.blur_kernel_size < 1 or self.blur_kernel_size % 2 == 0:
            raise ValidationError(f"blur kernel size must be odd, got {self.blur_kernel_size}")
        if not self.blur_sigma > 0:
            raise ValidationError(f"blur sigma must be positive, got {self.blur_sigma}")
        # f = 1 is accepted so the identity degradation can be expressed
        if self.scale_factor < 1:
            raise ValidationError(f"scale factor must be >= 1, got {self.scale_factor}")
        if self.border_mode != "replicate":
            raise ValidationError(f"unsupported border mode {self.border_mode!r}")
        return self


def gaussian_kernel(size, sigma):
    """Normalized ``size x size`` Gaussian sampled on the integer grid."""
    if size < 1 or size % 2 == 0:
        raise ValidationError(f"kernel size must be odd, got {size}")
    if not sigma > 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    r = np.arange(size, dtype=np.float64) - size // 2
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def blur(bands, kernel):
    """Correlate every plane of a (..., H, W) array with ``kernel``, replicate borders."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    pad = [(0, 0)] * (bands.ndim - 2) + [(ph, ph), (pw, pw)]
    padded = np.pad(np.asarray(bands, dtype=np.float64), pad, mode="edge")
    h, w = bands.shape[-2:]
    out = np.zeros(bands.shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * padded[..., i:i + h, j:j + w]
    return out


def blur_decimate(cube, config=DegradationConfig()):
    """Gaussian blur each band then keep rows/cols 0, f, 2f, ..."""
    config.validate()
    f = config.scale_factor
    if cube.height % f or cube.width % f:
        raise ValidationError(
            f"cube size {cube.height}x{cube.width} not divisible by scale factor {f}")
    kernel = gaussian_kernel(config.blur_kernel_size, config.blur_sigma)
    low = blur(cube.data, kernel)[:, ::f, ::f]
    return HyperCube(low.astype(cube.data.dtype), cube.wavelengths.copy())


def apply_spectral_response(cube, response):
    """Per-pixel band mixing ``Z = R X``."""
    if response.in_bands != cube.bands:
        raise ValidationError(
            f"response expects {response.in_bands} bands, cube has {cube.bands}")
    mixed = np.tensordot(response.weights, np.asarray(cube.data, dtype=np.float64), axes=(1, 0))
    wl = cube.wavelengths.astype(np.float64)
    # band centroid of each response row; 0 when the cube carries no wavelengths
    centres = response.weights @ wl if np.all(wl > 0) else np.zeros(response.out_bands)
    return HyperCube(mixed.astype(cube.data.dtype), centres)


def simulate_pair(hr, response, config=DegradationConfig()):
    """Synthesize (LR-HSI, HR-MSI) from a ground-truth HR-HSI."""
    return blur_decimate(hr, config), apply_spectral_response(hr, response)
