import json
import subprocess
import sys

import pytest

from nestdrop.cli import main
from nestdrop.curves import read_curve

from conftest import make_toy_idx, toy_config_dict


@pytest.fixture(scope="module")
def cli_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    make_toy_idx(root / "data")
    cfg = toy_config_dict(root / "data", root / "out")
    (root / "config.json").write_text(json.dumps(cfg))
    plain = json.loads(json.dumps(cfg))
    plain["nested_dropout"]["enabled"] = False
    (root / "plain.json").write_text(json.dumps(plain))
    return root


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


def test_train_then_k_sweep(cli_env, capsys):
    run = cli_env / "runs" / "nd"
    assert main(["train", "--config", str(cli_env / "config.json"), "--run-dir", str(run)]) == 0
    assert "120 iterations, 4 sweep checkpoints" in capsys.readouterr().out
    # config defaults to the copy stored in the run directory
    assert main(["k-sweep", "--run-dir", str(run), "--epsilon", "0.01"]) == 0
    out = capsys.readouterr().out
    assert "selected k*=" in out and out.count("accuracy=") == 4
    assert read_curve(run / "k_sweep.csv").ks == [1, 2, 3, 4]


def test_brain_damage_and_plot(cli_env, capsys, tmp_path):
    run = cli_env / "runs" / "plain"
    assert main(["train", "--config", str(cli_env / "plain.json"), "--run-dir", str(run)]) == 0
    assert main(["brain-damage", "--run-dir", str(run), "--order", "norm", "--out", str(tmp_path / "bd.csv")]) == 0
    assert read_curve(tmp_path / "bd.csv").ks == [1, 2, 3, 4]
    svg = tmp_path / "p.svg"
    assert main(["plot", str(tmp_path / "bd.csv"), "--out", str(svg), "--labels", "baseline"]) == 0
    assert "baseline" in svg.read_text()


def test_oracle_reports_iteration_ratio(cli_env, capsys, tmp_path):
    assert main(["oracle", "--config", str(cli_env / "config.json"), "--run-dir", str(tmp_path / "o"),
                 "--k-list", "1,2"]) == 0
    out = capsys.readouterr().out
    assert "oracle total iterations=240 single nested run=120 ratio=0.5000" in out


def test_layerwise(cli_env, capsys, tmp_path):
    assert main(["layerwise", "--config", str(cli_env / "config.json"), "--run-dir", str(tmp_path / "lw")]) == 0
    assert "conv1: 4 ->" in capsys.readouterr().out
    assert (tmp_path / "lw" / "layerwise.json").exists()


def test_seed_override_changes_run(cli_env, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cfg = str(cli_env / "config.json")
    assert main(["train", "--config", cfg, "--run-dir", str(a), "--seed", "1"]) == 0
    assert main(["train", "--config", cfg, "--run-dir", str(b), "--seed", "2"]) == 0
    assert (a / "checkpoints" / "final.ndck").read_bytes() != (b / "checkpoints" / "final.ndck").read_bytes()
    assert json.loads((a / "config.json").read_text())["solver"]["rng_seed"] == 1


def test_config_error_exit_code(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"network": {"preset": "nope"}, "dataset": {}, "solver": {}}))
    assert main(["train", "--config", str(tmp_path / "bad.json"), "--run-dir", str(tmp_path / "r")]) == 2
    err = error_line(capsys)
    assert err["exit_code"] == 2 and err["error"] == "ConfigError" and "preset" in err["message"]


def test_missing_config_is_config_error(tmp_path, capsys):
    assert main(["train", "--run-dir", str(tmp_path / "r")]) == 2
    assert main(["train", "--config", str(tmp_path / "none.json")]) == 2


def test_data_error_exit_code(tmp_path, capsys):
    make_toy_idx(tmp_path / "data")
    (tmp_path / "data" / "test-labels").write_bytes(b"\x00\x00\x08\x02" + bytes(8))
    (tmp_path / "c.json").write_text(json.dumps(toy_config_dict(tmp_path / "data", tmp_path / "o")))
    assert main(["train", "--config", str(tmp_path / "c.json")]) == 3
    assert error_line(capsys)["error"] == "MalformedFileError"


def test_divergence_exit_code(tmp_path, capsys):
    make_toy_idx(tmp_path / "data")
    cfg = toy_config_dict(tmp_path / "data", tmp_path / "o")
    cfg["solver"]["base_lr"] = 1e30
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "c.json")]) == 4
    err = error_line(capsys)
    assert err["exit_code"] == 4 and "iteration" in err["message"]


def test_protocol_error_exit_code(cli_env, tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["k-sweep", "--config", str(cli_env / "config.json"), "--run-dir", str(tmp_path / "empty")]) == 5
    assert error_line(capsys)["exit_code"] == 5


def test_plot_parse_error_exit_code(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("k,accuracy,checkpoint\n1,x,a\n")
    assert main(["plot", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "o.svg")]) == 3
    assert "line 2" in error_line(capsys)["message"]


def test_usage_error_and_module_entry_point():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    r = subprocess.run([sys.executable, "-m", "nestdrop.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("train", "k-sweep", "brain-damage", "oracle", "layerwise", "plot"):
        assert cmd in r.stdout
