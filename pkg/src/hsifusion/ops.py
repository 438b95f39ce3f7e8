"""Differentiable tensor operators with hand-written backward passes.

Tensors are plain ``numpy`` arrays laid out N x C x H x W.  Every forward
function has a ``*_backward`` counterpart returning the exact gradient of
``sum(grad_out * forward(...))`` with respect to each differentiable argument.
Computation stays in the dtype of the inputs, so the float64 path used by the
gradient checker is the same code as the float32 training path.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError


@dataclass
class ConvParams:
    """Weights of a (transposed) convolution.

    For ``conv2d`` the weights are ``(out, in, kh, kw)``.  For
    ``conv_transpose2d`` they are ``(in, out, kh, kw)``, i.e. the layout of the
    convolution whose adjoint is being applied.  ``groups`` may be 1 or, for the
    transposed convolution only, equal to the channel count (weights
    ``(C, 1, kh, kw)``).
    """

    weights: np.ndarray
    bias: np.ndarray = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    @property
    def kernel_size(self):
        return self.weights.shape[2:]


def _check4(x, name="input"):
    if x.ndim != 4:
        raise ValidationError(f"{name} must be N x C x H x W, got shape {x.shape}")


def conv_output_size(size, kernel, stride, padding):
    span = size + 2 * padding - kernel
    if span < 0:
        raise ValidationError(f"padded size {size + 2 * padding} smaller than kernel {kernel}")
    if span % stride:
        raise ValidationError(
            f"non-integer output size: ({size} + 2*{padding} - {kernel}) / {stride}")
    return span // stride + 1


def _conv_geometry(x, params):
    _check4(x)
    if params.groups != 1:
        raise ValidationError("conv2d supports groups=1 only")
    k, c, kh, kw = params.weights.shape
    if x.shape[1] != c:
        raise ValidationError(f"conv2d expects {c} input channels, got {x.shape[1]}")
    if params.stride < 1:
        raise ValidationError("stride must be >= 1")
    ho = conv_output_size(x.shape[2], kh, params.stride, params.padding)
    wo = conv_output_size(x.shape[3], kw, params.stride, params.padding)
    return ho, wo


def _flat_padded(x, p, kw):
    """Zero-padded planes flattened row-major, with kw-1 spare trailing zeros.

    Tap (a, b) of a stride-1 convolution is then the contiguous slice starting
    at ``a * Wp + b`` of length ``Ho * Wp``; the ``Wp - Wo`` wrap-around
    columns of each row are discarded afterwards.
    """
    n, c, h, w = x.shape
    hp, wp = h + 2 * p, w + 2 * p
    flat = np.zeros((n, c, hp * wp + kw - 1), dtype=x.dtype)
    flat[:, :, :hp * wp].reshape(n, c, hp, wp)[:, :, p:p + h, p:p + w] = x
    return flat, wp


def _im2col(x, kh, kw, stride, padding):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def conv2d(x, params):
    """Cross-correlation with zero padding; output (N, K, Ho, Wo)."""
    ho, wo = _conv_geometry(x, params)
    w = params.weights
    k, c, kh, kw = w.shape
    n = x.shape[0]
    dtype = np.result_type(x, w)
    x = x.astype(dtype, copy=False)
    w = w.astype(dtype, copy=False)
    if params.stride == 1:
        flat, wp = _flat_padded(x, params.padding, kw)
        m = ho * wp
        # (kh*kw*K, C): all taps in one GEMM, then shifted accumulation
        wstack = np.ascontiguousarray(w.transpose(2, 3, 0, 1).reshape(kh * kw * k, c))
        out = np.zeros((n, k, m), dtype=dtype)
        for i in range(n):
            prod = wstack @ flat[i]
            for a in range(kh):
                for b in range(kw):
                    t = a * kw + b
                    off = a * wp + b
                    out[i] += prod[t * k:(t + 1) * k, off:off + m]
        y = out.reshape(n, k, ho, wp)[:, :, :, :wo]
    else:
        cols = _im2col(x, kh, kw, params.stride, params.padding)
        y = np.matmul(w.reshape(k, -1), cols).reshape(n, k, ho, wo)
    y = np.ascontiguousarray(y)
    if params.bias is not None:
        y += params.bias.astype(dtype, copy=False)[None, :, None, None]
    return y


def conv2d_backward(x, params, grad_out, need_input_grad=True):
    """Gradients ``(grad_input, grad_weights, grad_bias)`` of a conv2d.

    ``grad_input`` is None when ``need_input_grad`` is false; ``grad_bias`` is
    None for a bias-free layer.
    """
    ho, wo = _conv_geometry(x, params)
    w = params.weights
    k, c, kh, kw = w.shape
    n, _, h, wd = x.shape
    if grad_out.shape != (n, k, ho, wo):
        raise ValidationError(
            f"grad_out shape {grad_out.shape} != forward output {(n, k, ho, wo)}")
    dtype = np.result_type(x, w, grad_out)
    x = x.astype(dtype, copy=False)
    w = w.astype(dtype, copy=False)
    g = grad_out.astype(dtype, copy=False)
    p = params.padding
    gb = g.sum(axis=(0, 2, 3)) if params.bias is not None else None
    gx = None
    if params.stride == 1:
        flat, wp = _flat_padded(x, p, kw)
        m = ho * wp
        gext = np.zeros((n, k, ho, wp), dtype=dtype)
        gext[:, :, :, :wo] = g
        gext = gext.reshape(n, k, m)
        gw = np.zeros((kh, kw, k, c), dtype=dtype)
        for i in range(n):
            for a in range(kh):
                for b in range(kw):
                    off = a * wp + b
                    gw[a, b] += gext[i] @ flat[i, :, off:off + m].T
        gw = np.ascontiguousarray(gw.transpose(2, 3, 0, 1))
        if need_input_grad:
            wstack_t = np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(kh * kw * c, k))
            gflat = np.zeros_like(flat)
            for i in range(n):
                prod = wstack_t @ gext[i]
                for a in range(kh):
                    for b in range(kw):
                        t = a * kw + b
                        off = a * wp + b
                        gflat[i, :, off:off + m] += prod[t * c:(t + 1) * c]
            hp = h + 2 * p
            gx = gflat[:, :, :hp * wp].reshape(n, c, hp, wp)[:, :, p:p + h, p:p + wd]
            gx = np.ascontiguousarray(gx)
    else:
        s = params.stride
        cols = _im2col(x, kh, kw, s, p)
        g2 = g.reshape(n, k, ho * wo)
        gw = np.einsum("nkm,njm->kj", g2, cols).reshape(w.shape)
        if need_input_grad:
            gcols = np.matmul(w.reshape(k, -1).T, g2).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=dtype)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, :, a:a + s * (ho - 1) + 1:s, b:b + s * (wo - 1) + 1:s] += gcols[:, :, a, b]
            gx = np.ascontiguousarray(gxp[:, :, p:p + h, p:p + wd])
    return gx, gw, gb


def _tconv_geometry(x, params):
    _check4(x)
    w = params.weights
    cin, cout_g, kh, kw = w.shape
    if params.padding != 0:
        raise ValidationError("transposed convolution returns the raw size; crop explicitly")
    if params.stride < 1:
        raise ValidationError("stride must be >= 1")
    if x.shape[1] != cin:
        raise ValidationError(f"transposed conv expects {cin} input channels, got {x.shape[1]}")
    if params.groups == 1:
        cout = cout_g
    elif params.groups == cin and cout_g == 1:
        cout = cin
    else:
        raise ValidationError("transposed conv supports groups=1 or groups=channels (depthwise)")
    s = params.stride
    return cout, (x.shape[2] - 1) * s + kh, (x.shape[3] - 1) * s + kw


def conv_transpose2d(x, params):
    """Adjoint of a strided convolution; raw output ((H-1)s + kh, (W-1)s + kw)."""
    cout, ho, wo = _tconv_geometry(x, params)
    w = params.weights
    cin, _, kh, kw = w.shape
    n, _, h, wd = x.shape
    s = params.stride
    dtype = np.result_type(x, w)
    x = x.astype(dtype, copy=False)
    w = w.astype(dtype, copy=False)
    y = np.zeros((n, cout, ho, wo), dtype=dtype)
    hs, ws = s * (h - 1) + 1, s * (wd - 1) + 1
    if params.groups == 1:
        cols = np.matmul(w.reshape(cin, -1).T, x.reshape(n, cin, h * wd))
        cols = cols.reshape(n, cout, kh, kw, h, wd)
        for a in range(kh):
            for b in range(kw):
                y[:, :, a:a + hs:s, b:b + ws:s] += cols[:, :, a, b]
    else:
        for a in range(kh):
            for b in range(kw):
                y[:, :, a:a + hs:s, b:b + ws:s] += x * w[None, :, 0, a, b, None, None]
    if params.bias is not None:
        y += params.bias.astype(dtype, copy=False)[None, :, None, None]
    return y


def conv_transpose2d_backward(x, params, grad_out, need_input_grad=True):
    """Gradients ``(grad_input, grad_weights, grad_bias)`` of conv_transpose2d."""
    cout, ho, wo = _tconv_geometry(x, params)
    w = params.weights
    cin, _, kh, kw = w.shape
    n, _, h, wd = x.shape
    if grad_out.shape != (n, cout, ho, wo):
        raise ValidationError(
            f"grad_out shape {grad_out.shape} != forward output {(n, cout, ho, wo)}")
    s = params.stride
    dtype = np.result_type(x, w, grad_out)
    x = x.astype(dtype, copy=False)
    w = w.astype(dtype, copy=False)
    g = grad_out.astype(dtype, copy=False)
    hs, ws = s * (h - 1) + 1, s * (wd - 1) + 1
    gb = g.sum(axis=(0, 2, 3)) if params.bias is not None else None
    gx = None
    if params.groups == 1:
        gcols = np.empty((n, cout, kh, kw, h, wd), dtype=dtype)
        for a in range(kh):
            for b in range(kw):
                gcols[:, :, a, b] = g[:, :, a:a + hs:s, b:b + ws:s]
        gcols = gcols.reshape(n, cout * kh * kw, h * wd)
        xf = x.reshape(n, cin, h * wd)
        gw = np.zeros((cin, cout * kh * kw), dtype=dtype)
        for i in range(n):
            gw += xf[i] @ gcols[i].T
        gw = gw.reshape(w.shape)
        if need_input_grad:
            gx = np.matmul(w.reshape(cin, -1), gcols).reshape(x.shape)
    else:
        gw = np.zeros_like(w)
        if need_input_grad:
            gx = np.zeros_like(x)
        for a in range(kh):
            for b in range(kw):
                gs = g[:, :, a:a + hs:s, b:b + ws:s]
                gw[:, 0, a, b] = np.einsum("nchw,nchw->c", gs, x)
                if need_input_grad:
                    gx += gs * w[None, :, 0, a, b, None, None]
    return gx, gw, gb


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    # subgradient 0 at x == 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def concat_channels(parts):
    if not parts:
        raise ValidationError("concat_channels needs at least one tensor")
    for t in parts:
        _check4(t)
    n, _, h, w = parts[0].shape
    for t in parts[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ValidationError(
                f"concat_channels: spatial/batch mismatch {parts[0].shape} vs {t.shape}")
    return np.concatenate(parts, axis=1)


def split_channels_backward(grad_out, sizes):
    """Split a channel-stacked gradient into pieces with ``sizes`` channels."""
    if sum(sizes) != grad_out.shape[1]:
        raise ValidationError(f"channel sizes {sizes} do not sum to {grad_out.shape[1]}")
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(grad_out, bounds, axis=1)]


def decimate(x, factor):
    """Keep samples at rows/cols 0, f, 2f, ..."""
    _check4(x)
    if factor < 1 or x.shape[2] % factor or x.shape[3] % factor:
        raise ValidationError(f"size {x.shape[2:]} not divisible by factor {factor}")
    return np.ascontiguousarray(x[:, :, ::factor, ::factor])


def decimate_backward(grad_out, factor):
    n, c, h, w = grad_out.shape
    g = np.zeros((n, c, h * factor, w * factor), dtype=grad_out.dtype)
    g[:, :, ::factor, ::factor] = grad_out
    return g


def crop_border(x, left, right, top, bottom):
    _check4(x)
    h, w = x.shape[2:]
    if min(left, right, top, bottom) < 0 or left + right >= w or top + bottom >= h:
        raise ValidationError(f"cannot crop ({left},{right},{top},{bottom}) from {h}x{w}")
    return np.ascontiguousarray(x[:, :, top:h - bottom, left:w - right])


def crop_backward(grad_out, left, right, top, bottom):
    n, c, h, w = grad_out.shape
    return np.pad(grad_out, ((0, 0), (0, 0), (top, bottom), (left, right)))


def add(*inputs):
    if not inputs:
        raise ValidationError("add needs at least one tensor")
    out = inputs[0].copy()
    for t in inputs[1:]:
        if t.shape != out.shape:
            raise ValidationError(f"add: shape mismatch {out.shape} vs {t.shape}")
        out += t
    return out


def add_backward(grad_out, count):
    return [grad_out] * count
