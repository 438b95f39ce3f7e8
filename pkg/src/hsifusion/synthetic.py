"""Synthetic linear-mixing scenes and RGB-like responses for desk-scale runs."""

import numpy as np

from .cube_io import HyperCube, SpectralResponse


def smooth_spectra(count, wavelengths, rng):
    """``count`` positive, smooth reflectance-like curves sampled at ``wavelengths``."""
    wl = np.asarray(wavelengths, dtype=np.float64)
    lo, hi = wl.min(), wl.max()
    span = max(hi - lo, 1.0)
    curves = np.full((count, wl.size), 0.05)
    for i in range(count):
        for _ in range(3):
            centre = rng.uniform(lo, hi)
            width = rng.uniform(0.15, 0.5) * span
            curves[i] += rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((wl - centre) / width) ** 2)
    return curves / curves.max(axis=1, keepdims=True)


def abundance_maps(count, height, width, rng, shapes=12):
    """Per-pixel mixing fractions with sharp edges and fine texture; sum to 1."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    maps = 0.2 + 0.1 * rng.random((count, height, width))
    for _ in range(shapes):
        k = rng.integers(count)
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        if rng.random() < 0.5:
            hy, hx = max(height / 4, 1), max(width / 4, 1)
            ry, rx = rng.uniform(min(2, hy), hy), rng.uniform(min(2, hx), hx)
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        else:
            hr = max(min(height, width) / 5, 1)
            rad = rng.uniform(min(2, hr), hr)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < rad * rad
        maps[k][mask] += rng.uniform(0.5, 1.5)
    for k in range(count):
        fy, fx = rng.uniform(0.3, 1.2, size=2)
        maps[k] += 0.3 * (1 + np.sin(fy * yy + rng.uniform(0, 6)) * np.sin(fx * xx))
    return maps / maps.sum(axis=0, keepdims=True)


def synthetic_cube(height, width, bands, seed=0, endmembers=3, wl_range=(400.0, 700.0)):
    """Linear mixture of ``endmembers`` spectra, max-normalized to [0, 1]."""
    rng = np.random.default_rng(seed)
    wl = np.linspace(wl_range[0], wl_range[1], bands)
    spectra = smooth_spectra(endmembers, wl, rng)
    maps = abundance_maps(endmembers, height, width, rng)
    data = np.tensordot(spectra.T, maps, axes=(1, 0))
    data /= data.max()
    return HyperCube(data.astype(np.float32), wl.astype(np.float32))


def rgb_response(wavelengths, centres=(610.0, 540.0, 465.0), width=40.0):
    """Gaussian R, G, B sensitivities normalized per row."""
    wl = np.asarray(wavelengths, dtype=np.float64)
    curves = np.exp(-0.5 * ((wl[None, :] - np.asarray(centres)[:, None]) / width) ** 2)
    return SpectralResponse.from_matrix(curves, names=("R", "G", "B")[:len(centres)])


def rgb_response_table(step=10.0, lo=380.0, hi=720.0, centres=(610.0, 540.0, 465.0), width=40.0):
    """CSV text of the Gaussian RGB response, in the response-table format."""
    wl = np.arange(lo, hi + step / 2, step)
    lines = ["wavelength,R,G,B"]
    for w in wl:
        vals = np.exp(-0.5 * ((w - np.asarray(centres)) / width) ** 2)
        lines.append(",".join([f"{w:g}"] + [f"{v:.8f}" for v in vals]))
    return "\n".join(lines) + "\n"
