import json
import re

import pytest

from ceilcomp.cli import run
from ceilcomp.store import read_header

from .test_data import fake_mnist


def call(capsys, *argv):
    code = run(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_profile_vgg16_ratio(capsys):
    code, out, err = call(capsys, "profile", "--arch", "vgg16", "--input", "3x224x224")
    assert code == 0 and err == ""
    ratio = float(re.search(r"largest_fm_ratio,([\d.]+)%", out).group(1))
    assert "largest_fm_ratio,2.3%" in out and abs(ratio - 2.3) <= 0.1


def test_profile_is_byte_identical(capsys):
    outs = [call(capsys, "profile", "--arch", "resnet18", "--format", "svg")[1] for _ in range(2)]
    assert outs[0] == outs[1] and "<svg" in outs[0] and "largest_fm_ratio,6.9%" in outs[0]


def test_plan_vgg19(capsys, tmp_path):
    code, out, _ = call(capsys, "plan", "--arch", "vgg19", "--input", "3x224x224", "--ceiling-factor", "8",
                        "--out", str(tmp_path / "p.json"))
    assert code == 0
    factor = float(re.search(r"overall_compression,([\d.]+)x", out).group(1))
    assert abs(factor - 2.2) <= 0.1
    assert json.loads((tmp_path / "p.json").read_text())["assignments"]["conv1_1"] == 8


def test_unknown_subcommand(capsys):
    code, out, err = call(capsys, "squash")
    assert code == 1
    assert err.startswith("error,1,usage,") and "usage:" in err


def test_missing_flag_is_usage_error(capsys):
    code, _, err = call(capsys, "plan", "--arch", "vgg16")
    assert code == 1 and "usage" in err


def test_error_exit_codes(capsys, tmp_path):
    code, _, err = call(capsys, "plan", "--arch", "vgg16", "--ceiling-factor", "1000")
    assert code == 3 and err.startswith("error,3,infeasible,") and err.count("\n") == 1
    code, _, err = call(capsys, "eval", "--model", str(tmp_path / "none.ceil"), "--dataset", "mnist")
    assert code == 2 and err.startswith("error,2,")
    code, _, err = call(capsys, "profile", "--arch", "nosuchnet")
    assert code == 1 and "lookup" in err
    bad = tmp_path / "bad.ceil"
    bad.write_bytes(b"NOPE" + bytes(20))
    code, _, err = call(capsys, "fold", "--ckpt", str(bad), "--out", str(tmp_path / "f.ceil"))
    assert code == 2 and err.startswith("error,2,format,")


def test_pipeline_on_small_mnist(capsys, tmp_path, monkeypatch):
    data = tmp_path / "data" / "mnist"
    data.mkdir(parents=True)
    fake_mnist(data, n_train=120, n_test=30)
    monkeypatch.setenv("CEILCOMP_DATA_DIR", str(tmp_path / "data"))
    cfg = tmp_path / "train.cfg"
    cfg.write_text("epochs_per_insertion = 1\nfinal_epochs = 1\nbatch_size = 32\n")
    base, comp, folded = (str(tmp_path / n) for n in ("base.ceil", "comp.ceil", "folded.ceil"))

    code, out, err = call(capsys, "train-baseline", "--dataset", "mnist", "--epochs", "1", "--out", base,
                          "--config", str(cfg))
    assert code == 0, err
    assert "test_acc," in out
    code, out, err = call(capsys, "plan", "--arch", "mnist_convnet", "--ceiling-factor", "4",
                          "--out", str(tmp_path / "plan.json"))
    assert code == 0 and "warning,conv2" in out
    code, out, err = call(capsys, "compress", "--ckpt", base, "--plan", str(tmp_path / "plan.json"),
                          "--dataset", "mnist", "--config", str(cfg), "--out", comp, "--log", str(tmp_path / "log.csv"))
    assert code == 0, err
    assert "delta_pp," in out and (tmp_path / "log.csv").exists()
    assert read_header(comp)["plan"]["assignments"] == {"conv1": 4, "conv2": 16}

    code, _, err = call(capsys, "fold", "--ckpt", comp, "--out", folded)
    assert code == 1 and "explicit" in err
    code, out, err = call(capsys, "fold", "--ckpt", comp, "--out", folded, "--explicit-lift")
    assert code == 0, err
    before, after = (int(v) for v in re.findall(r",(\d+)", out))
    assert after < before

    accs = []
    for flag, path in (("--ckpt", comp), ("--model", folded)):
        code, out, err = call(capsys, "eval", flag, path, "--dataset", "mnist")
        assert code == 0, err
        accs.append(float(out.split(",")[1]))
    assert accs[0] == accs[1]

    code, out, err = call(capsys, "report", "--ckpt-before", base, "--ckpt-after", comp,
                          "--out", str(tmp_path / "fig.svg"))
    assert code == 0, err
    svg = (tmp_path / "fig.svg").read_text()
    assert "#f4a3c0" in svg and "#4f7fd0" in svg and "stroke-dasharray" in svg
    rows = out.strip().splitlines()
    assert rows[1].startswith("conv1,16,14,14,3136,Stored,4,784")


def test_config_file_unknown_key(capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("momentumm = 0.5\n")
    code, _, err = call(capsys, "train-baseline", "--dataset", "mnist", "--out", str(tmp_path / "x"),
                        "--config", str(cfg))
    assert code == 1 and "momentumm" in err


@pytest.mark.parametrize("argv", [["--help"], ["profile", "--help"]])
def test_help_exits_zero(argv, capsys):
    with pytest.raises(SystemExit) as info:
        run(argv)
    assert info.value.code == 0
