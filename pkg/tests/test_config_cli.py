import subprocess
import sys

import pytest

from tavce.cli import build_parser, main
from tavce.config import SCHEMA, parse_config
from tavce.errors import ConfigError
from tavce.synthdata import read_dataset


def test_defaults():
    cfg = parse_config(None, [])
    assert (cfg.D, cfg.C, cfg.tau, cfg.lambda_reg, cfg.seed, cfg.train_seed) == (16, 32, 2, 1.0, 0, 0)
    assert cfg.use_cerl and cfg.use_car
    t1 = cfg.train_config(1)
    assert (t1.iterations, t1.learning_rate) == (2000, 1e-4)
    t2 = cfg.train_config(2)
    assert (t2.iterations, t2.learning_rate) == (1500, 2e-4)


def test_flag_overrides_file(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("lr = 1e-4  # file value\niters = 7\n", encoding="utf-8")
    cfg = parse_config(str(f), ["--lr", "2e-4"])
    assert cfg.lr == 2e-4 and cfg.iters == 7


def test_unknown_key_suggests_nearest(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("taus = 3\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="'taus'.*'tau'"):
        parse_config(str(f), [])
    with pytest.raises(ConfigError, match="'taus'.*'tau'"):
        parse_config(None, ["--taus", "3"])


def test_type_mismatch(tmp_path):
    with pytest.raises(ConfigError, match="tau"):
        parse_config(None, ["--tau", "two"])
    f = tmp_path / "c.cfg"
    f.write_text("use_car = maybe\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="use_car"):
        parse_config(str(f), [])


def test_boolean_flags():
    cfg = parse_config(None, ["--no-cerl", "--no-car"])
    assert not cfg.use_cerl and not cfg.use_car


def test_help_lists_every_key_with_default():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices["train-gen"]
    text = " ".join(sub.format_help().split())
    for key in SCHEMA:
        assert f"[{key.name}]" in text
        assert f"(default: {key.default})" in text


def test_missing_required_path(capsys):
    assert main(["train-metric"]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("tavce: error: ConfigError:") and "--data" in err[-1]


def test_gen_data_header_echo(tmp_path):
    out = tmp_path / "d.tvds"
    assert main(["gen-data", "--seed", "7", "--seqs", "10", "--T", "8", "--data", str(out)]) == 0
    samples, cfg = read_dataset(out)
    assert cfg.seed == 7 and cfg.num_sequences == 10 and len(samples) == 10


def test_runtime_error_is_one_line(tmp_path, capsys):
    code = main(["eval", "--data", str(tmp_path / "missing"), "--metric-ckpt", "x", "--report-dir", str(tmp_path)])
    assert code == 1
    lines = capsys.readouterr().err.strip().splitlines()
    assert lines[-1].startswith("tavce: error: FileNotFoundError:")


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "tavce", "grad-check", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "--grad-tol" in res.stdout


def test_grad_check_failure_names_op(tmp_path, capsys):
    # a tolerance no finite-difference check can meet forces a failure report
    code = main(["grad-check", "--grad-seeds", "1", "--grad-tol", "1e-300", "--report-dir", str(tmp_path)])
    assert code == 1
    out = capsys.readouterr()
    assert "add\t" in out.out and "FAIL" in out.out
    assert "GradCheckFailed" in out.err and "conv2d" in out.err
    assert (tmp_path / "grad_check.tsv").exists()
