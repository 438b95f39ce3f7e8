"""Central-difference verification of every hand-written backward pass."""

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import filters, network, ops
from .errors import ValidationError
from .ops import ConvParams


@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance

    def as_row(self):
        return f"{self.op_name},{self.max_rel_error:.3e},{self.tolerance:.0e},{'PASS' if self.passed else 'FAIL'}"


@dataclass
class Operator:
    """A forward map over a list of arrays and its vector-Jacobian product.

    ``backward(inputs, grad_out)`` returns one gradient per input, or None for
    inputs that are not differentiated.
    """

    name: str
    forward: callable
    backward: callable
    sample: callable  # (rng, dtype) -> list of arrays


def _conv_op(name, stride, padding, bias=True):
    def unpack(inp):
        return ConvParams(inp[1], inp[2] if bias else None, stride, padding)

    def fwd(inp):
        return ops.conv2d(inp[0], unpack(inp))

    def bwd(inp, g):
        gx, gw, gb = ops.conv2d_backward(inp[0], unpack(inp), g)
        return [gx, gw] + ([gb] if bias else [])

    def sample(rng, dtype):
        n, c, k = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 5)
        kh = int(rng.choice([1, 3]))
        size = stride * rng.integers(2, 4) + kh - 2 * padding
        size = max(size, kh)
        while (size + 2 * padding - kh) % stride:
            size += 1
        h, w = size, size + stride
        out = [rng.standard_normal((n, c, h, w)), rng.standard_normal((k, c, kh, kh))]
        if bias:
            out.append(rng.standard_normal(k))
        return [a.astype(dtype) for a in out]

    return Operator(name, fwd, bwd, sample)


def _tconv_op(name, grouped):
    def unpack(inp):
        c = inp[0].shape[1]
        return ConvParams(inp[1], None if grouped else inp[2], inp[-1], 0, c if grouped else 1)

    def fwd(inp):
        return ops.conv_transpose2d(inp[0], unpack(inp))

    def bwd(inp, g):
        gx, gw, gb = ops.conv_transpose2d_backward(inp[0], unpack(inp), g)
        return [gx, gw] + ([] if grouped else [gb]) + [None]

    def sample(rng, dtype):
        n, c, k = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        stride = int(rng.integers(1, 4))
        kh = int(rng.integers(stride, stride + 4))
        x = rng.standard_normal((n, c, rng.integers(2, 5), rng.integers(2, 5)))
        if grouped:
            return [x.astype(dtype), rng.standard_normal((c, 1, kh, kh)).astype(dtype), stride]
        return [x.astype(dtype), rng.standard_normal((c, k, kh, kh)).astype(dtype),
                rng.standard_normal(k).astype(dtype), stride]

    return Operator(name, fwd, bwd, sample)


def _rand4(rng, dtype, h=None, w=None, c=None):
    return rng.standard_normal((int(rng.integers(1, 3)), c or int(rng.integers(1, 4)),
                                h or int(rng.integers(2, 7)), w or int(rng.integers(2, 7)))).astype(dtype)


def _relu_sample(rng, dtype):
    x = _rand4(rng, dtype)
    # keep every entry at least 0.1 away from the kink
    return [(np.sign(x) + (x == 0)) * (0.1 + np.abs(x))]


def _concat_sample(rng, dtype):
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    return [rng.standard_normal((n, int(rng.integers(1, 4)), h, w)).astype(dtype)
            for _ in range(int(rng.integers(1, 4)))]


def _decimate_sample(rng, dtype):
    f = int(rng.integers(1, 4))
    return [_rand4(rng, dtype, h=f * int(rng.integers(1, 4)), w=f * int(rng.integers(1, 4))), f]


def _crop_sample(rng, dtype):
    x = _rand4(rng, dtype, h=int(rng.integers(5, 9)), w=int(rng.integers(5, 9)))
    return [x] + [int(v) for v in rng.integers(0, 3, size=4)]


def _filter_sample(rng, dtype):
    return [_rand4(rng, dtype, h=int(rng.integers(3, 10)), w=int(rng.integers(3, 10))),
            int(rng.integers(1, 7))]


def _interleave_sample(rng, dtype):
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    base, extra = int(rng.integers(1, 9)), int(rng.integers(0, 4))
    return [rng.standard_normal((n, base, h, w)).astype(dtype),
            rng.standard_normal((n, extra, h, w)).astype(dtype)]


def _add_sample(rng, dtype):
    x = _rand4(rng, dtype)
    return [x] + [rng.standard_normal(x.shape).astype(dtype) for _ in range(int(rng.integers(1, 3)))]


def _interleave_bwd(inp, g):
    base_g, extra_g = filters.split_interleaved(g, inp[1].shape[1])
    return [base_g, extra_g]


REGISTRY = OrderedDict((op.name, op) for op in [
    _conv_op("conv2d", stride=1, padding=1),
    _conv_op("conv2d_valid", stride=1, padding=0),
    _conv_op("conv2d_strided", stride=2, padding=1),
    _tconv_op("conv_transpose2d", grouped=False),
    _tconv_op("conv_transpose2d_depthwise", grouped=True),
    Operator("relu", lambda i: ops.relu(i[0]), lambda i, g: [ops.relu_backward(i[0], g)],
             _relu_sample),
    Operator("concat_channels", lambda i: ops.concat_channels(i),
             lambda i, g: ops.split_channels_backward(g, [t.shape[1] for t in i]), _concat_sample),
    Operator("decimate", lambda i: ops.decimate(i[0], i[1]),
             lambda i, g: [ops.decimate_backward(g, i[1]), None], _decimate_sample),
    Operator("crop_border", lambda i: ops.crop_border(*i),
             lambda i, g: [ops.crop_backward(g, *i[1:])] + [None] * 4, _crop_sample),
    Operator("add", lambda i: ops.add(*i), lambda i, g: ops.add_backward(g, len(i)), _add_sample),
    Operator("box_lowpass",
             lambda i: filters.box_lowpass(i[0], filters.FilterConfig(i[1])),
             lambda i, g: [filters.box_lowpass_backward(g, filters.FilterConfig(i[1])), None],
             _filter_sample),
    Operator("highpass",
             lambda i: filters.highpass(i[0], filters.FilterConfig(i[1])),
             lambda i, g: [filters.highpass_backward(g, filters.FilterConfig(i[1])), None],
             _filter_sample),
    Operator("interleave", lambda i: filters.build_c0(i[0], i[1]), _interleave_bwd,
             _interleave_sample),
])


def corrupted(op, input_index=1, factor=1.01):
    """Copy of ``op`` whose gradient for one input is scaled by ``factor``."""
    def bwd(inp, g):
        grads = list(op.backward(inp, g))
        grads[input_index] = grads[input_index] * factor
        return grads

    return Operator(f"{op.name}[fault]", op.forward, bwd, op.sample)


def _max_rel_error(numeric, analytic):
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1e-8)
    return float(np.max(np.abs(numeric - analytic) / denom)) if numeric.size else 0.0


def finite_difference_check(op, epsilon=1e-5, tolerance=1e-4, seed=0, inputs=None,
                            dtype=np.float64):
    """Compare ``op.backward`` with central differences of a random projection.

    ``op`` is an :class:`Operator` or a registered name.  The scalar checked is
    ``sum(R * forward(inputs))`` for a fixed Gaussian ``R``.
    """
    if isinstance(op, str):
        if op not in REGISTRY:
            raise ValidationError(f"unknown operator {op!r}; registered: {list(REGISTRY)}")
        op = REGISTRY[op]
    rng = np.random.default_rng(seed)
    inputs = list(op.sample(rng, dtype) if inputs is None else inputs)
    out = op.forward(inputs)
    proj = rng.standard_normal(out.shape)
    analytic = op.backward(inputs, proj.astype(out.dtype))
    worst = 0.0
    for k, (arr, grad) in enumerate(zip(inputs, analytic)):
        if grad is None or not isinstance(arr, np.ndarray):
            continue
        flat = arr.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            plus = float(np.sum(proj * op.forward(inputs)))
            flat[i] = old - epsilon
            minus = float(np.sum(proj * op.forward(inputs)))
            flat[i] = old
            numeric[i] = (plus - minus) / (2 * epsilon)
        worst = max(worst, _max_rel_error(numeric, np.asarray(grad, dtype=np.float64).reshape(-1)))
    return GradCheckReport(op.name, worst, tolerance)


TINY = dict(hsi_bands=4, msi_bands=2, scale_factor=2, feature_channels=8, num_blocks=1)


def _relu_pattern(cache):
    """Sign pattern of every ReLU pre-activation in a forward cache."""
    pre = [cache["a1"]] + [cache[k][1] for k in sorted(cache) if k.startswith("block")]
    if "a0" in cache:
        pre.append(cache["a0"])
    return np.concatenate([a.reshape(-1) > 0 for a in pre])


def network_gradcheck(variant="full", epsilon=1e-4, tolerance=1e-4, seed=0, batch=2,
                      low_size=4, fault=False, min_epsilon=1e-7, **overrides):
    """End-to-end check of ``network.backward`` over every parameter entry (float64).

    A large step keeps forward roundoff well below the 1e-8 error floor; when
    a step moves any ReLU input across zero the difference quotient straddles
    a kink, so that entry is retried with a 10x smaller step.
    """
    cfg = network.NetworkConfig(**{**TINY, **overrides, "variant": variant})
    rng = np.random.default_rng(seed)
    params = network.init_network(cfg, seed, dtype=np.float64)
    for name in params:
        # nonzero biases and perturbed upsamplers so every path carries signal
        params[name] = params[name] + 0.05 * rng.standard_normal(params[name].shape)
    f, S, s = cfg.scale_factor, cfg.hsi_bands, cfg.msi_bands
    y = rng.random((batch, S, low_size, low_size))
    z = rng.random((batch, s, f * low_size, f * low_size))
    x = rng.random((batch, S, f * low_size, f * low_size))
    _, cache = network.forward(params, cfg, y, z, retain=True)
    pattern = _relu_pattern(cache)
    grads = network.backward(params, cfg, cache, x)
    if fault:
        grads["c1_conv.weight"] = grads["c1_conv.weight"] * 1.01

    def evaluate():
        o, c = network.forward(params, cfg, y, z, retain=True)
        return o, np.array_equal(_relu_pattern(c), pattern)

    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            old, eps = flat[i], epsilon
            while True:
                flat[i] = old + eps
                plus, same_p = evaluate()
                flat[i] = old - eps
                minus, same_m = evaluate()
                flat[i] = old
                if (same_p and same_m) or eps / 10 < min_epsilon:
                    break
                eps /= 10
            # L(+) - L(-) factored elementwise to avoid cancelling two rounded means
            numeric[i] = np.mean((plus - minus) * (plus + minus - 2 * x)) / (2 * eps)
        worst = max(worst, _max_rel_error(numeric, grads[name].reshape(-1)))
    return GradCheckReport(f"network[{variant}]", worst, tolerance)


def run_all(seed=0, fault=False):
    """Every registered operator plus the three network variants."""
    reports = []
    for name, op in REGISTRY.items():
        if fault and name == "conv2d":
            op = corrupted(op)
        tol = 1e-6 if name == "relu" else 1e-4
        reports.append(finite_difference_check(op, tolerance=tol, seed=seed))
    for variant in network.VARIANTS:
        reports.append(network_gradcheck(variant, seed=seed, fault=fault))
    return reports
