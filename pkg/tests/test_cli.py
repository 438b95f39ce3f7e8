import subprocess
import sys

import numpy as np
import pytest

from hsifusion import cli, metrics
from hsifusion.cube_io import HyperCube, read_cube, write_cube
from hsifusion.errors import ValidationError
from hsifusion.synthetic import rgb_response_table, synthetic_cube

TINY = """\
# tiny desk configuration
data_dir = {data}
response_file = {resp}
patch_size = 16
patch_stride = 16
feature_channels = 4
num_blocks = 1
batch_size = 4
iterations = 10
checkpoint_every = 5
"""


@pytest.fixture
def workspace(tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    for i in range(2):
        cube = synthetic_cube(32, 32, 6, seed=i)
        # stored unnormalized so ingestion has something to undo
        write_cube(HyperCube(cube.data * 40.0, cube.wavelengths), data / f"scene{i}.hsc")
    resp = tmp_path / "resp.csv"
    resp.write_text(rgb_response_table())
    cfg = tmp_path / "run.cfg"
    cfg.write_text(TINY.format(data=data, resp=resp))
    return tmp_path, cfg


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_config_parsing_and_overrides(workspace):
    _, cfg = workspace
    rc = cli.load_run_config(cfg, ["iterations=3", "learning_rate = 0.5"])
    assert rc.iterations == 3 and rc.learning_rate == 0.5 and rc.patch_size == 16
    with pytest.raises(ValidationError, match="unknown config key"):
        cli.parse_assignments(["bogus_key = 1"])
    with pytest.raises(ValidationError):
        cli.parse_assignments(["iterations = many"])
    with pytest.raises(ValidationError):
        cli.parse_assignments(["no equals sign"])


def test_flags_win_over_config(workspace, tmp_path):
    _, cfg = workspace
    args = cli.build_parser().parse_args(["train", "--config", str(cfg), "--seed", "9",
                                          "--out", str(tmp_path / "o"), "--set", "seed=3"])
    rc = cli._resolve(args)
    assert rc.seed == 9 and rc.output_dir == str(tmp_path / "o")


def test_simulate(workspace, capsys):
    root, cfg = workspace
    out = root / "sim"
    assert run("simulate", "--config", cfg, "--out", out, "--set", "pseudocolor_bands=4,2,0") == 0
    lr, msi, hr = (read_cube(out / f"scene0.{k}.hsc") for k in ("lr", "msi", "hr"))
    assert lr.shape == (8, 8, 6) and msi.shape == (32, 32, 3) and hr.shape == (32, 32, 6)
    assert hr.data.max() == pytest.approx(1.0)
    assert (out / "scene0.lr.png").exists() and (out / "scene0.msi.png").exists()
    scales = (out / "scales.csv").read_text().splitlines()
    assert scales[0] == "name,scale" and float(scales[1].split(",")[1]) == pytest.approx(40.0, rel=1e-6)
    before = {p.name: p.read_bytes() for p in out.iterdir()}
    assert run("simulate", "--config", cfg, "--out", out, "--set", "pseudocolor_bands=4,2,0") == 0
    assert before == {p.name: p.read_bytes() for p in out.iterdir()}


def test_simulate_paper_sizes(tmp_path):
    data = tmp_path / "d"
    data.mkdir()
    write_cube(HyperCube(np.random.default_rng(0).random((31, 512, 512)).astype(np.float32),
                         np.linspace(400, 700, 31)), data / "big.hsc")
    (tmp_path / "r.csv").write_text(rgb_response_table())
    assert run("simulate", "--set", f"data_dir={data}", "--set", f"response_file={tmp_path / 'r.csv'}",
               "--out", tmp_path / "o") == 0
    assert read_cube(tmp_path / "o" / "big.lr.hsc").shape == (128, 128, 31)
    assert read_cube(tmp_path / "o" / "big.msi.hsc").shape == (512, 512, 3)


def test_simulate_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    (tmp_path / "r.csv").write_text(rgb_response_table())
    code = run("simulate", "--set", f"data_dir={tmp_path / 'empty'}",
               "--set", f"response_file={tmp_path / 'r.csv'}", "--out", tmp_path / "o")
    assert code == 1
    assert "no cubes found" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_validation_precedes_writes(workspace):
    root, cfg = workspace
    out = root / "never"
    assert run("train", "--config", cfg, "--out", out, "--set", "variant=bogus") == 1
    assert run("train", "--config", cfg, "--out", out, "--set", "response_file=/nope.csv") == 1
    assert run("train", "--config", cfg, "--out", out, "--set", "val_fraction=0") == 1
    assert not out.exists()


def test_usage_errors_exit_1(capsys):
    assert run("frobnicate") == 1
    assert run("evaluate", "--ref", "a.hsc") == 1
    assert run("train", "--config", "/does/not/exist.cfg") == 1


def _train(root, cfg, out="tr"):
    assert run("train", "--config", cfg, "--out", root / out) == 0
    return root / out


def test_train_fuse_evaluate(workspace, capsys):
    root, cfg = workspace
    tr = _train(root, cfg)
    rows = (tr / "loss.csv").read_text().splitlines()
    assert rows[0] == "step,train_loss,val_loss" and len(rows) == 11
    assert rows[5].split(",")[2] != "" and rows[1].split(",")[2] == ""
    assert (tr / "provenance.csv").read_text().startswith("split,index,image,row,col")

    assert run("simulate", "--config", cfg, "--out", root / "sim") == 0
    capsys.readouterr()
    argv = ["fuse", "--config", cfg, "--out", root / "fz", "--lr", root / "sim/scene0.lr.hsc",
            "--msi", root / "sim/scene0.msi.hsc", "--checkpoint", tr / "checkpoint.hsck"]
    assert run(*argv) == 0
    assert "32x32x6" in capsys.readouterr().out
    fused = root / "fz/scene0.fused.hsc"
    first = fused.read_bytes()
    assert read_cube(fused).shape == (32, 32, 6)
    assert run(*argv) == 0
    assert fused.read_bytes() == first

    capsys.readouterr()
    assert run("evaluate", "--ref", root / "sim/scene0.hr.hsc", "--est", fused) == 0
    name, values = metrics.parse_row(capsys.readouterr().out.strip())
    assert name == "scene0" and len(values) == 4
    assert run("evaluate", "--ref", fused, "--est", fused) == 0
    assert capsys.readouterr().out.strip().endswith(",inf,0,0,1")
    assert run("evaluate", "--ref", root / "sim/scene0.msi.hsc", "--est", fused) == 1


def test_fuse_band_mismatch_names_both(workspace, capsys):
    root, cfg = workspace
    tr = _train(root, cfg)
    lr = HyperCube(np.zeros((5, 8, 8), np.float32))
    msi = HyperCube(np.zeros((3, 32, 32), np.float32))
    write_cube(lr, root / "x.lr.hsc")
    write_cube(msi, root / "x.msi.hsc")
    capsys.readouterr()
    code = run("fuse", "--config", cfg, "--out", root / "fz", "--lr", root / "x.lr.hsc",
               "--msi", root / "x.msi.hsc", "--checkpoint", tr / "checkpoint.hsck")
    err = capsys.readouterr().err
    assert code == 1
    assert "hsi_bands=6" in err and "hsi_bands=5" in err


def test_train_divergence_exit_2(workspace):
    root, cfg = workspace
    code = run("train", "--config", cfg, "--out", root / "dv", "--set", "learning_rate=1e30",
               "--set", "iterations=50")
    assert code == 2


def test_ablate(workspace, capsys):
    root, cfg = workspace
    assert run("ablate", "--config", cfg, "--out", root / "ab") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [ln.split(",")[0] for ln in lines] == ["full", "no_highpass", "single_scale"]
    for ln in lines:
        metrics.parse_row(ln)
    prov = {v: (root / "ab" / v / "provenance.csv").read_text()
            for v in ("full", "no_highpass", "single_scale")}
    assert prov["full"] == prov["no_highpass"] == prov["single_scale"]
    assert (root / "ab/ablation.csv").read_text().count("\n") == 4


def test_ablate_reports_divergence_inline(workspace, monkeypatch):
    root, cfg = workspace
    from hsifusion import trainer
    from hsifusion.errors import DivergenceError

    real = trainer.train

    def flaky(data, net, tcfg, **kw):
        if tcfg.variant == "no_highpass":
            raise DivergenceError("boom", step=3)
        return real(data, net, tcfg, **kw)

    monkeypatch.setattr(cli.trainer, "train", flaky)
    rc = cli.load_run_config(cfg)
    data, tr, va, _ = cli._load_training_data(rc)
    lines = cli.format_ablation(cli.run_ablation(rc, tr, va))
    assert lines[0].startswith("full,")
    assert lines[1].startswith("no_highpass(diverged@3)")
    assert len(lines) == 3


def test_gradcheck_command(capsys):
    assert run("gradcheck") == 0
    out = capsys.readouterr().out.strip().splitlines()
    names = [ln.split(",")[0] for ln in out[1:]]
    assert "conv2d" in names and "network[full]" in names and len(names) == len(set(names))
    assert all(ln.endswith("PASS") for ln in out[1:])


def test_gradcheck_fault_fails(capsys):
    assert run("gradcheck", "--inject-fault") == 2
    out = capsys.readouterr().out
    assert "conv2d[fault]" in out and "FAIL" in out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hsifusion", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("simulate", "train", "fuse", "evaluate", "ablate", "gradcheck"):
        assert cmd in proc.stdout
