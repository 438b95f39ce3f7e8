"""Two-branch multi-scale fusion network and its exact backward pass.

Branches
--------
* spectral: ``y_up = crop(depthwise_transposed_conv(y))``, initialized to bilinear
  interpolation, carries the LR-HSI spectra to the HR grid;
* detail: high-pass LR-HSI and decimated high-pass HR-MSI form ``c0``; a conv +
  ReLU + learned transposed conv lifts it to the HR grid, the HR-MSI details are
  interleaved to form ``c1``, and a conv + ResNet body + linear tail produce the
  signed residual ``e``.

The output is ``o = y_up + e``.
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ValidationError
from .filters import FilterConfig, InterleaveSpec, build_c0, build_c1, highpass, split_interleaved
from .ops import ConvParams

VARIANTS = ("full", "no_highpass", "single_scale")


@dataclass(frozen=True)
class NetworkConfig:
    hsi_bands: int = 31
    msi_bands: int = 3
    scale_factor: int = 4
    feature_channels: int = 64
    num_blocks: int = 6
    conv_kernel: int = 3
    upsample_kernel: int = 6
    # None -> 2f - f % 2, the smallest kernel that holds a bilinear tent
    spectral_kernel: int = None
    variant: str = "full"
    interleave: InterleaveSpec = field(default_factory=InterleaveSpec)
    filters: FilterConfig = field(default_factory=FilterConfig)

    def validate(self):
        for name in ("hsi_bands", "feature_channels", "scale_factor", "conv_kernel",
                     "upsample_kernel"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.msi_bands < 0 or self.num_blocks < 0:
            raise ValidationError("msi_bands and num_blocks must be nonnegative")
        if self.conv_kernel % 2 == 0:
            raise ValidationError("conv_kernel must be odd for same-size convolutions")
        if self.upsample_kernel < self.scale_factor:
            raise ValidationError("upsample_kernel must be >= scale_factor")
        if self.spectral_kernel is not None and self.spectral_kernel < self.scale_factor:
            raise ValidationError("spectral_kernel must be >= scale_factor")
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        self.filters.validate()
        return self

    @property
    def spectral_kernel_size(self):
        if self.spectral_kernel is not None:
            return self.spectral_kernel
        f = self.scale_factor
        return 2 * f - f % 2


def _split_crop(raw_extra):
    left = raw_extra // 2
    return left, raw_extra - left


def bilinear_kernel(size, factor):
    """1-D bilinear (tent) weights for a stride-``factor`` transposed conv."""
    centre = (2 * factor - 1 - factor % 2) / 2.0
    a = np.arange(size, dtype=np.float64)
    return np.clip(1.0 - np.abs(a - centre) / factor, 0.0, None)


def parameter_shapes(config):
    """Ordered (name, shape) list of every learnable tensor."""
    c = config.validate()
    k, F, S, s = c.conv_kernel, c.feature_channels, c.hsi_bands, c.msi_bands
    ks = c.spectral_kernel_size
    shapes = []
    if c.variant == "single_scale":
        shapes += [("hp_up.weight", (S, 1, ks, ks)),
                   ("lift_conv.weight", (F, S, k, k)), ("lift_conv.bias", (F,))]
    else:
        ku = c.upsample_kernel
        shapes += [("c0_conv.weight", (F, S + s, k, k)), ("c0_conv.bias", (F,)),
                   ("detail_up.weight", (F, F, ku, ku)), ("detail_up.bias", (F,))]
    shapes += [("c1_conv.weight", (F, F + s, k, k)), ("c1_conv.bias", (F,))]
    for i in range(c.num_blocks):
        for j in (1, 2):
            shapes += [(f"blocks.{i}.conv{j}.weight", (F, F, k, k)),
                       (f"blocks.{i}.conv{j}.bias", (F,))]
    shapes += [("tail_conv.weight", (S, F, k, k)), ("tail_conv.bias", (S,)),
               ("spectral_up.weight", (S, 1, ks, ks))]
    return shapes


def init_network(config, seed=0, dtype=np.float32):
    """He-normal conv weights, zero biases, bilinear depthwise upsamplers."""
    rng = np.random.default_rng(seed)
    f = config.scale_factor
    params = OrderedDict()
    for name, shape in parameter_shapes(config):
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name in ("spectral_up.weight", "hp_up.weight"):
            t = bilinear_kernel(shape[-1], f)
            params[name] = np.broadcast_to(np.outer(t, t), shape).astype(dtype)
        else:
            # transposed-conv weights are (in, out, kh, kw); fan-in is the input channels
            fan_in = shape[0 if name == "detail_up.weight" else 1] * shape[2] * shape[3]
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return params


def count_parameters(params):
    return int(sum(int(np.asarray(p).size) for p in params.values()))


def _conv(params, name, padding):
    return ConvParams(params[f"{name}.weight"], params.get(f"{name}.bias"), 1, padding)


def _tconv(params, name, stride, groups=1):
    return ConvParams(params[f"{name}.weight"], params.get(f"{name}.bias"), stride, 0, groups)


def _check_inputs(config, y, z):
    if y.ndim != 4 or z.ndim != 4:
        raise ValidationError("y and z must be N x C x H x W tensors")
    f = config.scale_factor
    if y.shape[1] != config.hsi_bands:
        raise ValidationError(f"y has {y.shape[1]} bands, network expects {config.hsi_bands}")
    if z.shape[1] != config.msi_bands:
        raise ValidationError(f"z has {z.shape[1]} bands, network expects {config.msi_bands}")
    if z.shape[0] != y.shape[0]:
        raise ValidationError("y and z batch sizes differ")
    if z.shape[2] != f * y.shape[2] or z.shape[3] != f * y.shape[3]:
        raise ValidationError(
            f"z spatial size {z.shape[2:]} != {f} x y spatial size {y.shape[2:]}")


def forward(params, config, y, z, retain=False):
    """Return ``(o, cache)``; ``cache`` is None unless ``retain``."""
    c = config.validate()
    _check_inputs(c, y, z)
    f, pad = c.scale_factor, c.conv_kernel // 2
    cache = {}

    ys_raw = ops.conv_transpose2d(y, _tconv(params, "spectral_up", f, groups=c.hsi_bands))
    ys_crop = _split_crop(c.spectral_kernel_size - f)
    y_up = ops.crop_border(ys_raw, ys_crop[0], ys_crop[1], ys_crop[0], ys_crop[1])

    if c.variant == "no_highpass":
        y_hp, z_hp = y, z
    else:
        y_hp, z_hp = highpass(y, c.filters), highpass(z, c.filters)

    if c.variant == "single_scale":
        hp_raw = ops.conv_transpose2d(y_hp, _tconv(params, "hp_up", f, groups=c.hsi_bands))
        y_hp_up = ops.crop_border(hp_raw, ys_crop[0], ys_crop[1], ys_crop[0], ys_crop[1])
        u = ops.conv2d(y_hp_up, _conv(params, "lift_conv", pad))
        cache.update(y_hp=y_hp, y_hp_up=y_hp_up)
    else:
        z_hp_d = ops.decimate(z_hp, f)
        c0 = build_c0(y_hp, z_hp_d, c.interleave)
        a0 = ops.conv2d(c0, _conv(params, "c0_conv", pad))
        t = ops.relu(a0)
        u_raw = ops.conv_transpose2d(t, _tconv(params, "detail_up", f))
        cu = _split_crop(c.upsample_kernel - f)
        u = ops.crop_border(u_raw, cu[0], cu[1], cu[0], cu[1])
        cache.update(c0=c0, a0=a0, t=t)

    c1 = build_c1(u, z_hp, c.interleave)
    a1 = ops.conv2d(c1, _conv(params, "c1_conv", pad))
    r = ops.relu(a1)
    cache.update(c1=c1, a1=a1)
    for i in range(c.num_blocks):
        h1 = ops.conv2d(r, _conv(params, f"blocks.{i}.conv1", pad))
        h2 = ops.relu(h1)
        h3 = ops.conv2d(h2, _conv(params, f"blocks.{i}.conv2", pad))
        cache[f"block{i}"] = (r, h1, h2)
        r = ops.add(r, h3)
    e = ops.conv2d(r, _conv(params, "tail_conv", pad))
    o = ops.add(y_up, e)
    cache.update(r_final=r, e=e, y_up=y_up, y=y)
    return o, (cache if retain else None)


def loss_mse(o, x):
    """Mean squared error over every element."""
    if o.shape != x.shape:
        raise ValidationError(f"shape mismatch {o.shape} vs {x.shape}")
    d = np.asarray(o, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    return float(np.mean(d * d))


def loss_grad(o, x):
    return (2.0 / o.size) * (o - x.astype(o.dtype, copy=False))


def backward(params, config, cache, x):
    """Gradient of ``loss_mse(forward(...), x)`` for every parameter tensor."""
    if cache is None:
        raise ValidationError("backward needs the cache from forward(..., retain=True)")
    c = config
    f, pad = c.scale_factor, c.conv_kernel // 2
    grads = OrderedDict((name, None) for name in params)
    o = cache["y_up"] + cache["e"]
    g_o = loss_grad(o, x)

    ys_crop = _split_crop(c.spectral_kernel_size - f)
    g_raw = ops.crop_backward(g_o, ys_crop[0], ys_crop[1], ys_crop[0], ys_crop[1])
    _, grads["spectral_up.weight"], _ = ops.conv_transpose2d_backward(
        cache["y"], _tconv(params, "spectral_up", f, groups=c.hsi_bands), g_raw,
        need_input_grad=False)

    g_r, grads["tail_conv.weight"], grads["tail_conv.bias"] = ops.conv2d_backward(
        cache["r_final"], _conv(params, "tail_conv", pad), g_o)
    for i in reversed(range(c.num_blocks)):
        r_in, h1, h2 = cache[f"block{i}"]
        name1, name2 = f"blocks.{i}.conv1", f"blocks.{i}.conv2"
        g_h2, grads[f"{name2}.weight"], grads[f"{name2}.bias"] = ops.conv2d_backward(
            h2, _conv(params, name2, pad), g_r)
        g_h1 = ops.relu_backward(h1, g_h2)
        g_in, grads[f"{name1}.weight"], grads[f"{name1}.bias"] = ops.conv2d_backward(
            r_in, _conv(params, name1, pad), g_h1)
        g_r = g_r + g_in

    g_a1 = ops.relu_backward(cache["a1"], g_r)
    g_c1, grads["c1_conv.weight"], grads["c1_conv.bias"] = ops.conv2d_backward(
        cache["c1"], _conv(params, "c1_conv", pad), g_a1)
    g_u, _ = split_interleaved(g_c1, c.msi_bands, c.interleave)

    if c.variant == "single_scale":
        g_hp_up, grads["lift_conv.weight"], grads["lift_conv.bias"] = ops.conv2d_backward(
            cache["y_hp_up"], _conv(params, "lift_conv", pad), g_u)
        g_hp_raw = ops.crop_backward(g_hp_up, ys_crop[0], ys_crop[1], ys_crop[0], ys_crop[1])
        _, grads["hp_up.weight"], _ = ops.conv_transpose2d_backward(
            cache["y_hp"], _tconv(params, "hp_up", f, groups=c.hsi_bands), g_hp_raw,
            need_input_grad=False)
    else:
        cu = _split_crop(c.upsample_kernel - f)
        g_u_raw = ops.crop_backward(g_u, cu[0], cu[1], cu[0], cu[1])
        g_t, grads["detail_up.weight"], grads["detail_up.bias"] = ops.conv_transpose2d_backward(
            cache["t"], _tconv(params, "detail_up", f), g_u_raw)
        g_a0 = ops.relu_backward(cache["a0"], g_t)
        _, grads["c0_conv.weight"], grads["c0_conv.bias"] = ops.conv2d_backward(
            cache["c0"], _conv(params, "c0_conv", pad), g_a0, need_input_grad=False)
    return grads

