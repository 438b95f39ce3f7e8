"""Command-line entry point: simulate | train | fuse | evaluate | ablate | gradcheck.

Configuration is a flat ``key = value`` file (``#`` starts a comment); keys
are the field names listed in :data:`RunConfig`.  ``--set key=value`` and the
common flags override file values.  Exit status: 0 success, 1 validation or
usage error, 2 runtime failure.
"""

import argparse
import dataclasses
import logging
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import gradcheck, metrics, network, trainer
from .cube_io import HyperCube, export_pseudocolor, load_spectral_response, read_cube, write_cube
from .degradation import DegradationConfig, simulate_pair
from .errors import CubeFormatError, DivergenceError, ValidationError
from .filters import FilterConfig, InterleaveSpec

log = logging.getLogger("hsifusion")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


@dataclass
class RunConfig:
    # degradation
    blur_kernel_size: int = 3
    blur_sigma: float = 0.5
    scale_factor: int = 4
    border_mode: str = "replicate"
    # filters
    lowpass_size: int = 6
    # network (0 bands = infer from the data / response)
    hsi_bands: int = 0
    msi_bands: int = 0
    feature_channels: int = 64
    num_blocks: int = 6
    conv_kernel: int = 3
    upsample_kernel: int = 6
    spectral_kernel: int = 0
    variant: str = "full"
    interleave: str = ""
    # training
    patch_size: int = 64
    patch_stride: int = 32
    batch_size: int = 32
    iterations: int = 100_000
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.2
    seed: int = 0
    checkpoint_every: int = 1000
    # paths
    data_dir: str = ""
    response_file: str = ""
    checkpoint: str = ""
    output_dir: str = "."
    # "r,g,b" band indices for PNG previews; empty disables them
    pseudocolor_bands: str = ""

    def degradation(self):
        return DegradationConfig(self.blur_kernel_size, self.blur_sigma, self.scale_factor,
                                 self.border_mode).validate()

    def filters(self):
        return FilterConfig(self.lowpass_size, self.border_mode).validate()

    def interleave_spec(self):
        if not self.interleave.strip():
            return InterleaveSpec()
        return InterleaveSpec(tuple(int(v) for v in self.interleave.split(",")))

    def network(self, hsi_bands, msi_bands, variant=None):
        for key, given, actual in (("hsi_bands", self.hsi_bands, hsi_bands),
                                   ("msi_bands", self.msi_bands, msi_bands)):
            if given and given != actual:
                raise ValidationError(f"config {key}={given} but data has {actual}")
        return network.NetworkConfig(
            hsi_bands=hsi_bands, msi_bands=msi_bands, scale_factor=self.scale_factor,
            feature_channels=self.feature_channels, num_blocks=self.num_blocks,
            conv_kernel=self.conv_kernel, upsample_kernel=self.upsample_kernel,
            spectral_kernel=self.spectral_kernel or None, variant=variant or self.variant,
            interleave=self.interleave_spec(), filters=self.filters()).validate()

    def training(self, variant=None):
        return trainer.TrainConfig(
            patch_size=self.patch_size, patch_stride=self.patch_stride,
            scale_factor=self.scale_factor, batch_size=self.batch_size,
            iterations=self.iterations, learning_rate=self.learning_rate,
            adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2, adam_eps=self.adam_eps,
            val_fraction=self.val_fraction, seed=self.seed, variant=variant or self.variant,
            checkpoint_every=self.checkpoint_every).validate()

    def pseudocolor(self):
        if not self.pseudocolor_bands.strip():
            return None
        bands = tuple(int(v) for v in self.pseudocolor_bands.split(","))
        if len(bands) != 3:
            raise ValidationError("pseudocolor_bands needs exactly three indices")
        return bands


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, raw):
    kind = _FIELD_TYPES[key]
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError as exc:
        raise ValidationError(f"config key {key!r}: cannot parse {raw!r}") from exc
    return raw


def parse_assignments(lines, source="<config>"):
    """Parse ``key = value`` lines; unknown keys are rejected."""
    values = {}
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{num}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ValidationError(f"{source}:{num}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_run_config(path=None, overrides=()):
    values = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"config file not found: {p}")
        values.update(parse_assignments(p.read_text().splitlines(), str(p)))
    values.update(parse_assignments(overrides, "--set"))
    return RunConfig(**values)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"usage: {message}")


def build_parser():
    parser = _Parser(prog="hsifusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; may be repeated")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("simulate", help="degrade HR cubes into LR-HSI / HR-MSI pairs"))
    common(sub.add_parser("train", help="train one network variant"))
    fuse = common(sub.add_parser("fuse", help="fuse an LR-HSI with an HR-MSI"))
    fuse.add_argument("--lr", required=True, dest="lr_path")
    fuse.add_argument("--msi", required=True, dest="msi_path")
    fuse.add_argument("--checkpoint")
    ev = common(sub.add_parser("evaluate", help="quality indexes of an estimate"))
    ev.add_argument("--ref", required=True)
    ev.add_argument("--est", required=True)
    common(sub.add_parser("ablate", help="train and compare all three variants"))
    gc = common(sub.add_parser("gradcheck", help="finite-difference check of every backward"))
    gc.add_argument("--inject-fault", action="store_true",
                    help="corrupt the conv2d and network weight gradients by 1%%")
    return parser


def _resolve(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output_dir={args.out}")
    if getattr(args, "checkpoint", None):
        overrides.append(f"checkpoint={args.checkpoint}")
    cfg = load_run_config(args.config, overrides)
    if cfg.variant not in network.VARIANTS:
        raise ValidationError(f"unknown variant {cfg.variant!r}; choose from {network.VARIANTS}")
    cfg.degradation()
    cfg.filters()
    cfg.pseudocolor()
    return cfg


def _require_file(path, what):
    if not path:
        raise ValidationError(f"{what} not set")
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _cube_paths(cfg):
    if not cfg.data_dir:
        raise ValidationError("data_dir not set")
    d = Path(cfg.data_dir)
    if not d.is_dir():
        raise ValidationError(f"data_dir is not a directory: {d}")
    paths = sorted(d.glob("*.hsc"))
    if not paths:
        raise ValidationError(f"no cubes found in {d}")
    return paths


def ingest(path):
    """Read a cube and max-normalize it to [0, 1]; returns (cube, scale)."""
    cube = read_cube(path)
    scale = float(np.max(cube.data))
    if scale > 0:
        cube = HyperCube((cube.data / scale).astype(np.float32), cube.wavelengths)
    return cube, scale


def _load_training_data(cfg):
    paths = _cube_paths(cfg)
    resp_path = _require_file(cfg.response_file, "response_file")
    cubes, names = [], []
    for p in paths:
        cube, _ = ingest(p)
        cubes.append(cube)
        names.append(p.stem)
    if any(c.bands != cubes[0].bands for c in cubes):
        raise ValidationError("training cubes have differing band counts")
    response = load_spectral_response(resp_path, cubes[0].wavelengths)
    tcfg = cfg.training()
    data = trainer.extract_patches(cubes, response, cfg.degradation(), tcfg, image_ids=names)
    train_set, val_set = trainer.split_dataset(data, tcfg.val_fraction, tcfg.seed)
    return data, train_set, val_set, response


def _write_provenance(path, train_set, val_set, cfg):
    order = trainer.batch_indices(0, len(train_set), cfg.batch_size, cfg.seed) if len(train_set) else []
    with open(path, "w") as fh:
        fh.write("split,index,image,row,col\n")
        for split, ds in (("train", train_set), ("val", val_set)):
            for i, (img, r, c) in enumerate(ds.provenance):
                fh.write(f"{split},{i},{img},{r},{c}\n")
        fh.write("# first batch: " + " ".join(str(int(i)) for i in order) + "\n")


def cmd_simulate(cfg):
    paths = _cube_paths(cfg)
    resp_path = _require_file(cfg.response_file, "response_file")
    degrade = cfg.degradation()
    rgb = cfg.pseudocolor()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    scales = []
    for p in paths:
        hr, scale = ingest(p)
        response = load_spectral_response(resp_path, hr.wavelengths)
        lr, msi = simulate_pair(hr, response, degrade)
        name = p.stem
        write_cube(hr, out / f"{name}.hr.hsc")
        write_cube(lr, out / f"{name}.lr.hsc")
        write_cube(msi, out / f"{name}.msi.hsc")
        if rgb is not None:
            export_pseudocolor(hr, *rgb, out / f"{name}.hr.png")
            export_pseudocolor(lr, *rgb, out / f"{name}.lr.png")
            if msi.bands >= 3:
                export_pseudocolor(msi, 0, 1, 2, out / f"{name}.msi.png")
        scales.append((name, scale))
        print(f"{name}: {hr.height}x{hr.width}x{hr.bands} -> "
              f"lr {lr.height}x{lr.width}x{lr.bands}, msi {msi.height}x{msi.width}x{msi.bands}")
    with open(out / "scales.csv", "w") as fh:
        fh.write("name,scale\n")
        fh.writelines(f"{n},{s!r}\n" for n, s in scales)
    return EXIT_OK


def cmd_train(cfg):
    data, train_set, val_set, response = _load_training_data(cfg)
    netcfg = cfg.network(data.hr.shape[1], data.msi.shape[1])
    tcfg = cfg.training()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "checkpoint.hsck"
    _write_provenance(out / "provenance.csv", train_set, val_set, tcfg)
    log.info("training %s on %d patches (%d val), %d parameters", tcfg.variant, len(train_set),
             len(val_set), network.count_parameters(network.init_network(netcfg, tcfg.seed)))
    try:
        result = trainer.train(train_set, netcfg, tcfg, val=val_set, checkpoint_path=ckpt)
    except DivergenceError:
        raise
    trainer.save_checkpoint(result.params, result.state, result.step, ckpt)
    trainer.write_loss_log(result.log, out / "loss.csv")
    print(f"trained {tcfg.variant} for {result.step} iterations; checkpoint {ckpt}")
    return EXIT_OK


def check_checkpoint(params, netcfg, path):
    expected = dict(network.parameter_shapes(netcfg))
    got = {k: tuple(v.shape) for k, v in params.items()}
    if got != expected:
        ck_bands = got.get("tail_conv.bias", ("?",))[0]
        name = next((k for k in list(expected) + list(got) if got.get(k) != expected.get(k)))
        raise ValidationError(
            f"checkpoint {path} does not match the configuration: checkpoint hsi_bands={ck_bands} "
            f"vs config/input hsi_bands={netcfg.hsi_bands} (variant {netcfg.variant}); "
            f"first difference {name}: checkpoint {got.get(name)} vs config {expected.get(name)}")


def cmd_fuse(cfg, lr_path, msi_path):
    lr_path = _require_file(lr_path, "LR-HSI")
    msi_path = _require_file(msi_path, "HR-MSI")
    ckpt = _require_file(cfg.checkpoint, "checkpoint")
    lr, msi = read_cube(lr_path), read_cube(msi_path)
    netcfg = cfg.network(lr.bands, msi.bands)
    params, _, _ = trainer.load_checkpoint(ckpt)
    check_checkpoint(params, netcfg, ckpt)
    o, _ = network.forward(params, netcfg, lr.data[None].astype(np.float32),
                           msi.data[None].astype(np.float32))
    name = lr_path.name.split(".")[0]
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    fused = HyperCube(o[0], lr.wavelengths)
    write_cube(fused, out / f"{name}.fused.hsc")
    print(f"fused {lr.height}x{lr.width}x{lr.bands} + {msi.height}x{msi.width}x{msi.bands} -> "
          f"{fused.height}x{fused.width}x{fused.bands}: {out / (name + '.fused.hsc')}")
    return EXIT_OK


def cmd_evaluate(cfg, ref_path, est_path):
    ref = read_cube(_require_file(ref_path, "reference"))
    est = read_cube(_require_file(est_path, "estimate"))
    if ref.shape != est.shape:
        raise ValidationError(f"shape mismatch: reference {ref.shape} vs estimate {est.shape}")
    rep = metrics.report(ref, est, ratio=cfg.scale_factor)
    print(rep.as_row(Path(est_path).name.split(".")[0]))
    return EXIT_OK


def mean_report(refs, ests, ratio):
    reps = [metrics.report(r, e, ratio) for r, e in zip(refs, ests)]
    avg = lambda xs: math.inf if any(math.isinf(x) for x in xs) else float(np.mean(xs))
    return metrics.MetricsReport(avg([r.psnr for r in reps]), avg([r.sam for r in reps]),
                                 avg([r.ergas for r in reps]), avg([r.ssim for r in reps]), ratio)


def run_ablation(cfg, train_set, val_set, out=None):
    """Train every variant on the same split and seed; returns ``[(name, report or None, note)]``."""
    rows = []
    eval_set = val_set if len(val_set) else train_set
    for variant in network.VARIANTS:
        tcfg = cfg.training(variant)
        netcfg = cfg.network(train_set.hr.shape[1], train_set.msi.shape[1], variant)
        vdir = None
        if out is not None:
            vdir = Path(out) / variant
            vdir.mkdir(parents=True, exist_ok=True)
            _write_provenance(vdir / "provenance.csv", train_set, val_set, tcfg)
        try:
            result = trainer.train(train_set, netcfg, tcfg, val=val_set,
                                   checkpoint_path=vdir / "checkpoint.hsck" if vdir else None)
        except DivergenceError as exc:
            rows.append((variant, None, f"diverged@{exc.step}"))
            continue
        if vdir is not None:
            trainer.write_loss_log(result.log, vdir / "loss.csv")
        pred = trainer.predict(result.params, netcfg, eval_set)
        rows.append((variant, mean_report(eval_set.hr, pred, cfg.scale_factor), ""))
    return rows


def format_ablation(rows):
    lines = []
    for name, rep, note in rows:
        if rep is None:
            lines.append(f"{name}({note}),nan,nan,nan,nan")
        else:
            lines.append(rep.as_row(name))
    return lines


def cmd_ablate(cfg):
    data, train_set, val_set, _ = _load_training_data(cfg)
    cfg.network(data.hr.shape[1], data.msi.shape[1])
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = format_ablation(run_ablation(cfg, train_set, val_set, out))
    (out / "ablation.csv").write_text("name,psnr_db,sam_deg,ergas,ssim\n" + "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_gradcheck(cfg, inject_fault=False):
    reports = gradcheck.run_all(seed=cfg.seed, fault=inject_fault)
    print("op,max_rel_error,tolerance,status")
    for rep in reports:
        print(rep.as_row())
    return EXIT_OK if all(r.passed for r in reports) else EXIT_RUNTIME


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _resolve(args)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "fuse":
            return cmd_fuse(cfg, args.lr_path, args.msi_path)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.ref, args.est)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        return cmd_gradcheck(cfg, args.inject_fault)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DivergenceError, CubeFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
