"""Box low-pass / high-pass detail extraction and the detail-stack builders."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class FilterConfig:
    lowpass_size: int = 6
    border_mode: str = "replicate"

    def validate(self):
        if self.lowpass_size < 1:
            raise ValidationError(f"lowpass size must be >= 1, got {self.lowpass_size}")
        if self.border_mode != "replicate":
            raise ValidationError(f"unsupported border mode {self.border_mode!r}")
        return self


def _window_extent(k):
    # even kernels take one more tap before the anchor: k=6 -> offsets -3..+2
    before = k // 2
    return before, k - 1 - before


def box_lowpass(x, config=FilterConfig()):
    """Per-channel k x k mean filter with replicate borders, same size output.

    Evaluated as ``x + mean(window - x)`` so that constant planes map to
    themselves bit-exactly.
    """
    config.validate()
    k = config.lowpass_size
    if k == 1:
        return x.copy()
    before, after = _window_extent(k)
    h, w = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(before, after), (before, after)]
    xp = np.pad(x, pad, mode="edge")
    dev = np.zeros_like(x)
    for a in range(k):
        for b in range(k):
            dev += xp[..., a:a + h, b:b + w] - x
    return x + dev / (k * k)


def box_lowpass_backward(grad_out, config=FilterConfig()):
    """Adjoint of ``box_lowpass`` (a fixed linear map)."""
    k = config.lowpass_size
    if k == 1:
        return grad_out.copy()
    before, after = _window_extent(k)
    h, w = grad_out.shape[-2:]
    gp = np.zeros(grad_out.shape[:-2] + (h + k - 1, w + k - 1), dtype=grad_out.dtype)
    for a in range(k):
        for b in range(k):
            gp[..., a:a + h, b:b + w] += grad_out
    # fold replicate padding back onto the edge rows/cols
    gp[..., before, :] += gp[..., :before, :].sum(axis=-2)
    gp[..., before + h - 1, :] += gp[..., before + h:, :].sum(axis=-2)
    gp = gp[..., before:before + h, :]
    gp[..., before] += gp[..., :before].sum(axis=-1)
    gp[..., before + w - 1] += gp[..., before + w:].sum(axis=-1)
    return gp[..., before:before + w] / (k * k)


def highpass(x, config=FilterConfig()):
    """Detail component ``x - box_lowpass(x)``."""
    return x - box_lowpass(x, config)


def highpass_backward(grad_out, config=FilterConfig()):
    return grad_out - box_lowpass_backward(grad_out, config)


def default_positions(base, extra):
    """Head / middle / tail slots for ``extra`` detail bands among ``base`` bands."""
    total = base + extra
    if extra == 0:
        return ()
    if extra == 1:
        return (0,)
    if extra == 2:
        return (0, total - 1)
    if extra == 3:
        return (0, math.ceil(base / 2) + 1, total - 1)
    return tuple(int(round(v)) for v in np.linspace(0, total - 1, extra))


@dataclass(frozen=True)
class InterleaveSpec:
    """Output channel indices that receive the MSI detail bands.

    ``positions=None`` means the default head/middle/tail layout for the base
    channel count the spec is applied to.
    """

    positions: tuple = None

    def resolve(self, base, extra):
        pos = default_positions(base, extra) if self.positions is None else tuple(self.positions)
        if len(pos) != extra:
            raise ValidationError(f"{len(pos)} interleave positions for {extra} MSI bands")
        total = base + extra
        if any(p < 0 or p >= total for p in pos):
            raise ValidationError(f"interleave position out of range [0, {total}): {pos}")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ValidationError(f"interleave positions must increase strictly: {pos}")
        return pos


def _interleave(base_t, extra_t, spec):
    if base_t.ndim != 4 or extra_t.ndim != 4:
        raise ValidationError("interleave expects N x C x H x W tensors")
    if base_t.shape[0] != extra_t.shape[0] or base_t.shape[2:] != extra_t.shape[2:]:
        raise ValidationError(f"spatial mismatch {base_t.shape} vs {extra_t.shape}")
    base, extra = base_t.shape[1], extra_t.shape[1]
    pos = spec.resolve(base, extra)
    n, _, h, w = base_t.shape
    out = np.empty((n, base + extra, h, w), dtype=np.result_type(base_t, extra_t))
    mask = np.zeros(base + extra, dtype=bool)
    mask[list(pos)] = True
    out[:, mask] = extra_t
    out[:, ~mask] = base_t
    return out


def split_interleaved(grad, extra, spec=InterleaveSpec()):
    """Inverse of ``build_c0`` / ``build_c1``: returns (base part, MSI part)."""
    base = grad.shape[1] - extra
    pos = spec.resolve(base, extra)
    mask = np.zeros(base + extra, dtype=bool)
    mask[list(pos)] = True
    return np.ascontiguousarray(grad[:, ~mask]), np.ascontiguousarray(grad[:, mask])


def build_c0(y_hp, z_hp_d, spec=InterleaveSpec()):
    """LR-scale detail stack: S HSI detail bands with s MSI detail bands inserted."""
    return _interleave(y_hp, z_hp_d, spec)


def build_c1(features, z_hp, spec=InterleaveSpec()):
    """HR-scale stack: upsampled feature maps with s MSI detail bands inserted."""
    return _interleave(features, z_hp, spec)
