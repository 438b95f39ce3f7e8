"""Full-reference quality indexes for hyperspectral estimates.

All functions take a reference and an estimate as :class:`HyperCube` or as
``(bands, height, width)`` arrays and compute in float64.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .cube_io import HyperCube
from .errors import ValidationError


def _as_array(cube):
    data = cube.data if isinstance(cube, HyperCube) else np.asarray(cube)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3:
        raise ValidationError(f"expected (bands, height, width), got shape {data.shape}")
    return data.astype(np.float64)


def _pair(ref, est):
    r, e = _as_array(ref), _as_array(est)
    if r.shape != e.shape:
        raise ValidationError(f"reference shape {r.shape} != estimate shape {e.shape}")
    return r, e


def psnr(ref, est, peak=1.0):
    """Band-averaged PSNR in dB; +inf as soon as any band is reproduced exactly."""
    r, e = _pair(ref, est)
    mse = np.mean((r - e) ** 2, axis=(1, 2))
    if np.any(mse == 0):
        return math.inf
    return float(np.mean(10.0 * np.log10(peak * peak / mse)))


def sam(ref, est):
    """Mean spectral angle in degrees over pixels with non-negligible spectra."""
    r, e = _pair(ref, est)
    if r.shape[0] < 2:
        raise ValidationError("SAM needs at least 2 bands")
    dot = np.sum(r * e, axis=0)
    nr2 = np.sum(r * r, axis=0)
    ne2 = np.sum(e * e, axis=0)
    keep = (np.sqrt(nr2) >= 1e-8) & (np.sqrt(ne2) >= 1e-8)
    if not np.any(keep):
        return math.nan
    cos = np.clip(dot[keep] / np.sqrt(nr2[keep] * ne2[keep]), -1.0, 1.0)
    return float(np.degrees(np.mean(np.arccos(cos))))


def ergas(ref, est, ratio=4):
    """100/ratio * sqrt(mean_b (RMSE_b / mean_b)^2); zero-mean bands are skipped."""
    r, e = _pair(ref, est)
    mu = np.mean(r, axis=(1, 2))
    rmse = np.sqrt(np.mean((r - e) ** 2, axis=(1, 2)))
    keep = mu != 0
    if not np.all(keep):
        warnings.warn(f"ERGAS: skipping {int(np.sum(~keep))} band(s) with zero reference mean")
    if not np.any(keep):
        return math.nan
    return float(100.0 / ratio * np.sqrt(np.mean((rmse[keep] / mu[keep]) ** 2)))


def gaussian_window(size=11, sigma=1.5):
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-t * t / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable correlation with a 1-D window, valid region only."""
    k = g.size
    h, w = img.shape[-2:]
    rows = sum(g[i] * img[..., i:i + h - k + 1, :] for i in range(k))
    return sum(g[j] * rows[..., :, j:j + w - k + 1] for j in range(k))


def ssim(ref, est, peak=1.0, window=11, sigma=1.5):
    """Mean single-scale SSIM (Gaussian window, valid region) averaged over bands."""
    r, e = _pair(ref, est)
    if min(r.shape[1:]) < window:
        raise ValidationError(f"SSIM needs spatial size >= {window}, got {r.shape[1:]}")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    g = gaussian_window(window, sigma)
    mu_r, mu_e = _filter_valid(r, g), _filter_valid(e, g)
    var_r = _filter_valid(r * r, g) - mu_r * mu_r
    var_e = _filter_valid(e * e, g) - mu_e * mu_e
    cov = _filter_valid(r * e, g) - mu_r * mu_e
    smap = ((2 * mu_r * mu_e + c1) * (2 * cov + c2)) / (
        (mu_r * mu_r + mu_e * mu_e + c1) * (var_r + var_e + c2))
    return float(np.mean(smap.mean(axis=(1, 2))))


@dataclass(frozen=True)
class MetricsReport:
    psnr: float
    sam: float
    ergas: float
    ssim: float
    ratio: float = 4

    def as_row(self, name=None):
        """``name,psnr_db,sam_deg,ergas,ssim`` with 6 significant digits."""
        fields = [_fmt(v) for v in (self.psnr, self.sam, self.ergas, self.ssim)]
        return ",".join(([name] if name is not None else []) + fields)


def _fmt(value):
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.6g}"


def parse_row(line):
    """Inverse of :meth:`MetricsReport.as_row`; returns ``(name, values)``."""
    parts = [p.strip() for p in line.strip().split(",")]
    if len(parts) == 4:
        name, vals = None, parts
    elif len(parts) == 5:
        name, vals = parts[0], parts[1:]
    else:
        raise ValidationError(f"metrics row needs 4 or 5 fields: {line!r}")
    try:
        return name, tuple(float(v) for v in vals)
    except ValueError as exc:
        raise ValidationError(f"bad metrics value in {line!r}") from exc


def report(ref, est, ratio=4, peak=1.0):
    return MetricsReport(psnr=psnr(ref, est, peak), sam=sam(ref, est),
                         ergas=ergas(ref, est, ratio), ssim=ssim(ref, est, peak),
                         ratio=ratio)
