"""Patch extraction, Adam optimization of the fusion loss, checkpoints, loss logs."""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import network
from .cube_io import HyperCube, read_checkpoint, write_checkpoint
from .degradation import DegradationConfig, simulate_pair
from .errors import CheckpointError, DivergenceError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 64
    patch_stride: int = 32
    scale_factor: int = 4
    batch_size: int = 32
    iterations: int = 100_000
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.2
    seed: int = 0
    variant: str = "full"
    checkpoint_every: int = 1000

    def validate(self):
        if not 0 < self.val_fraction < 1:
            raise ValidationError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.scale_factor < 1 or self.patch_size % self.scale_factor:
            raise ValidationError(
                f"patch_size {self.patch_size} not divisible by scale_factor {self.scale_factor}")
        if self.patch_stride < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValidationError("patch_stride, batch_size and checkpoint_every must be >= 1")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if self.variant not in network.VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}")
        return self


@dataclass
class AdamState:
    m: OrderedDict
    v: OrderedDict
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(OrderedDict((k, np.zeros_like(p)) for k, p in params.items()),
                   OrderedDict((k, np.zeros_like(p)) for k, p in params.items()), 0)


@dataclass
class PatchDataset:
    """Aligned (HR-HSI, LR-HSI, HR-MSI) patch stacks, N x C x H x W each."""

    hr: np.ndarray
    lr: np.ndarray
    msi: np.ndarray
    provenance: list = field(default_factory=list)  # (image id, row, col)

    def __len__(self):
        return self.hr.shape[0]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=int)
        return PatchDataset(self.hr[idx], self.lr[idx], self.msi[idx],
                            [self.provenance[i] for i in idx])


def extract_patches(cubes, response, degrade=DegradationConfig(), config=TrainConfig(),
                    image_ids=None):
    """Sliding-window HR patches (row-major order), each degraded to LR/MSI."""
    config.validate()
    if degrade.scale_factor != config.scale_factor:
        raise ValidationError("degradation and training scale factors differ")
    p, step = config.patch_size, config.patch_stride
    ids = list(image_ids) if image_ids is not None else list(range(len(cubes)))
    hr, lr, msi, prov = [], [], [], []
    for cid, cube in zip(ids, cubes):
        if cube.height < p or cube.width < p:
            raise ValidationError(
                f"cube {cid} is {cube.height}x{cube.width}, smaller than patch size {p}")
        for r in range(0, cube.height - p + 1, step):
            for c in range(0, cube.width - p + 1, step):
                patch = HyperCube(cube.data[:, r:r + p, c:c + p], cube.wavelengths)
                low, ms = simulate_pair(patch, response, degrade)
                hr.append(patch.data)
                lr.append(low.data)
                msi.append(ms.data)
                prov.append((cid, r, c))
    if not hr:
        raise ValidationError("no patches extracted")
    stack = lambda xs: np.stack(xs).astype(np.float32)
    return PatchDataset(stack(hr), stack(lr), stack(msi), prov)


def split_dataset(dataset, val_fraction, seed):
    """Deterministic shuffled (train, val) partition."""
    if not 0 < val_fraction < 1:
        raise ValidationError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    if n_val >= n:
        raise ValidationError(f"validation split would leave no training patches (n={n})")
    return dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val]))


def adam_step(params, grads, state, config):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    t = state.t + 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = OrderedDict(), OrderedDict(), OrderedDict()
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} != parameter {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter '{name}'",
                                  step=t, parameter=name)
        g = g.astype(p.dtype, copy=False)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_p[name] = (p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)).astype(p.dtype)
        new_m[name], new_v[name] = m.astype(p.dtype), v.astype(p.dtype)
    return new_p, AdamState(new_m, new_v, t)


def batch_indices(step, n, batch_size, seed):
    """Patch indices used at 0-based ``step``: epoch-shuffled, without replacement."""
    b = min(batch_size, n)
    per_epoch = math.ceil(n / b)
    epoch, j = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[j * b:(j + 1) * b]


def evaluate_loss(params, net_config, data, batch_size=32):
    """Mean squared error over a whole dataset (element-weighted)."""
    total, count = 0.0, 0
    for i in range(0, len(data), batch_size):
        o, _ = network.forward(params, net_config, data.lr[i:i + batch_size],
                               data.msi[i:i + batch_size])
        x = data.hr[i:i + batch_size]
        total += network.loss_mse(o, x) * o.size
        count += o.size
    return total / count


def predict(params, net_config, data, batch_size=32):
    outs = [network.forward(params, net_config, data.lr[i:i + batch_size],
                            data.msi[i:i + batch_size])[0]
            for i in range(0, len(data), batch_size)]
    return np.concatenate(outs)


@dataclass
class TrainResult:
    params: OrderedDict
    state: AdamState
    log: list  # (step, train_loss, val_loss or None)
    step: int


def train(data, net_config, config, val=None, params=None, state=None, start_step=0,
          checkpoint_path=None):
    """Minimize the mean squared fusion loss with Adam.

    Logs the training loss of every step (before its update) and, every
    ``checkpoint_every`` steps, the validation loss and a checkpoint.  Passing
    ``params``/``state``/``start_step`` from a checkpoint resumes the run
    exactly.  Raises :class:`DivergenceError` on a non-finite loss; the last
    checkpoint on disk is left untouched.
    """
    config.validate()
    net_config = replace(net_config, variant=config.variant,
                         scale_factor=config.scale_factor).validate()
    if len(data) == 0:
        raise ValidationError("training split is empty")
    if params is None:
        params = network.init_network(net_config, config.seed)
    if state is None:
        state = AdamState.zeros_like(params)
    rows = []
    for step in range(start_step, config.iterations):
        idx = batch_indices(step, len(data), config.batch_size, config.seed)
        # overflow surfaces as a non-finite loss below, so numpy need not warn
        with np.errstate(over="ignore", invalid="ignore"):
            o, cache = network.forward(params, net_config, data.lr[idx], data.msi[idx],
                                       retain=True)
            loss = network.loss_mse(o, data.hr[idx])
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite training loss at step {step + 1}", step=step + 1)
        grads = network.backward(params, net_config, cache, data.hr[idx])
        params, state = adam_step(params, grads, state, config)
        val_loss = None
        if (step + 1) % config.checkpoint_every == 0:
            if val is not None and len(val):
                val_loss = evaluate_loss(params, net_config, val, config.batch_size)
            if checkpoint_path is not None:
                save_checkpoint(params, state, step + 1, checkpoint_path)
            log.info("step %d train %.6g val %s", step + 1, loss, val_loss)
        rows.append((step + 1, loss, val_loss))
    return TrainResult(params, state, rows, max(start_step, config.iterations))


def save_checkpoint(params, state, step, path):
    records = OrderedDict()
    for name, p in params.items():
        records[f"param/{name}"] = p
    for name in params:
        records[f"adam.m/{name}"] = state.m[name]
        records[f"adam.v/{name}"] = state.v[name]
    write_checkpoint(path, step, records)


def load_checkpoint(path):
    """Return ``(params, state, step)``."""
    step, records = read_checkpoint(path)
    params, m, v = OrderedDict(), OrderedDict(), OrderedDict()
    for key, arr in records.items():
        kind, _, name = key.partition("/")
        {"param": params, "adam.m": m, "adam.v": v}.get(kind, {})[name] = arr
    if not params or set(m) != set(params) or set(v) != set(params):
        raise CheckpointError("checkpoint lacks parameter or optimizer records", Path(path))
    return params, AdamState(OrderedDict((k, m[k]) for k in params),
                             OrderedDict((k, v[k]) for k in params), step), step


def write_loss_log(rows, path):
    with open(path, "w") as fh:
        fh.write("step,train_loss,val_loss\n")
        for step, tr, va in rows:
            fh.write(f"{step},{tr!r},{'' if va is None else repr(va)}\n")
