import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from enkbf_lab.cli import cli_main
from enkbf_lab.config import load_config, parse_config
from enkbf_lab.errors import ConfigInvalid
from enkbf_lab.model import load_model
from enkbf_lab.paths import read_record_csv

EXPLODING = """
[model]
d_x = 1
d_y = 1
A = [[1.0e200]]
C = [[1.0]]
R1 = [[1.0]]
R2 = [[1.0]]
m0 = [1.0]
P0 = [[1.0]]
"""


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


# ---------------------------------------------------------------- config

def test_generator_model_section():
    cfg = parse_config({"model": {"d_x": 3, "seed": 4}})
    assert cfg.generator.d_y == 3 and cfg.generator.seed == 4
    assert cfg.build_model().d_x == 3


def test_explicit_model_section():
    cfg = parse_config({"model": {"d_x": 1, "d_y": 1, "A": [[-1.0]], "C": [[1.0]],
                                  "R1": [[1.0]], "R2": [[1.0]], "m0": [0.0], "P0": [[1.0]]}})
    np.testing.assert_array_equal(cfg.build_model().A, [[-1.0]])


def test_empty_config_has_no_model():
    assert parse_config({}).build_model() is None


@pytest.mark.parametrize("data", [
    {"models": {}},
    {"model": {"d_x": 2, "colour": 1}},
    {"model": {"seed": 1}},
    {"experiment": {"replicate": 40}},
    {"estimator": {"pmf": "geometric"}},
    {"experiment": 3},
])
def test_invalid_configs(data):
    with pytest.raises(ConfigInvalid):
        parse_config(data)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigInvalid):
        load_config(tmp_path / "missing.toml")
    with pytest.raises(ConfigInvalid):
        load_config(write(tmp_path, "[model\nd_x = 1"))


# ---------------------------------------------------------------- cli

def test_kbf_happy_path(tmp_path, capsys):
    out = tmp_path / "d"
    assert cli_main(["kbf", "--dim", "1", "--T", "1", "--seed", "1", "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / "kbf_trajectory.csv")))
    assert rows[0] == ["step", "t", "mean_0", "cov_0_0"]
    assert len(rows) == 1 + 2 ** 8 + 1
    assert float(rows[1][2]) == 6.0


def test_missing_model_is_usage_error(tmp_path, capsys):
    assert cli_main(["kbf", "--T", "1", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "--dim" in err


@pytest.mark.parametrize("argv", [
    ["kbf", "--dim", "1", "--seed", "-1"],
    ["kbf", "--dim", "1", "--seed", str(2 ** 64)],
    ["kbf", "--dim", "1", "--levels", "3-5"],
    ["kbf", "--dim", "0"],
    ["kbf", "--dim", "1", "--T", "0"],
    ["frobnicate"],
    [],
    ["experiment", "figure-3", "--dim", "2"],
    ["experiment", "bias", "--dim", "1", "--replicates", "5"],
])
def test_invalid_arguments_exit_1(tmp_path, argv, capsys):
    assert cli_main(argv + ["--out", str(tmp_path)] if argv else argv) == 1
    assert capsys.readouterr().err


def test_unknown_config_key_exit_1(tmp_path, capsys):
    cfg = write(tmp_path, "[experiment]\nreplicatez = 40\n")
    assert cli_main(["kbf", "--dim", "1", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "replicatez" in capsys.readouterr().err


def test_missing_config_file_exit_1(tmp_path):
    assert cli_main(["kbf", "--config", str(tmp_path / "nope.toml")]) == 1


def test_numerical_failure_exit_2(tmp_path, capsys):
    cfg = write(tmp_path, EXPLODING)
    code = cli_main(["enkbf", "--config", cfg, "--T", "1", "--levels", "3..3",
                     "--out", str(tmp_path)])
    assert code == 2
    assert "numerical failure" in capsys.readouterr().err


def test_help_exits_0(capsys):
    assert cli_main(["--help"]) == 0
    assert cli_main(["--version"]) == 0


def test_simulate_round_trip(tmp_path):
    assert cli_main(["simulate", "--dim", "2", "--T", "2", "--levels", "5..5", "--seed", "3",
                     "--out", str(tmp_path)]) == 0
    m = load_model(tmp_path / "model.toml")
    assert m.d_x == 2
    rec = read_record_csv(tmp_path / "record.csv", 5)
    assert rec.grid.n_steps == 2 * 2 ** 5


def test_simulate_is_reproducible(tmp_path):
    for d in ("a", "b"):
        cli_main(["simulate", "--dim", "1", "--T", "1", "--levels", "4..4", "--seed", "9",
                  "--out", str(tmp_path / d)])
    assert (tmp_path / "a" / "record.csv").read_bytes() == (tmp_path / "b" / "record.csv").read_bytes()


def test_enkbf_command(tmp_path):
    assert cli_main(["enkbf", "--dim", "1", "--T", "1", "--levels", "4..4", "--particles", "20",
                     "--replicates", "3", "--variant", "vanilla", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "enkbf.csv")))
    assert len(rows) == 3 and rows[0]["particles"] == "20" and rows[0]["level"] == "4"


def test_mlenkbf_command(tmp_path):
    assert cli_main(["mlenkbf", "--dim", "1", "--T", "1", "--levels", "2..4", "--particles", "40",
                     "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "mlenkbf_levels.csv")))
    assert [r["level"] for r in rows] == ["2", "3", "4"]
    assert [r["particles"] for r in rows] == ["120", "60", "30"]
    summary = json.loads((tmp_path / "mlenkbf_summary.json").read_text())
    assert summary["cost"] == sum(float(r["cost"]) for r in rows)


def test_unbiased_command_via_config(tmp_path):
    cfg = write(tmp_path, """
[model]
d_x = 1
seed = 2

[estimator]
estimator = "cs"
N0 = 4
l_start = 1
l_max = 2
p_max = 2
M = 12
""")
    assert cli_main(["unbiased", "--config", cfg, "--T", "1", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "unbiased_samples.csv")))
    assert len(rows) == 12
    summary = json.loads((tmp_path / "unbiased_summary.json").read_text())
    assert summary["M"] == 12 and summary["failure_count"] == 0


def test_experiment_mse_vs_cost_fig3_setup(tmp_path, capsys):
    """d_x = d_y = 2, T = 30, coupled-sum only, at a reduced sample budget."""
    cfg = write(tmp_path, """
[experiment]
replicates = 30
m_values = [2, 4]

[estimator]
N0 = 4
l_start = 1
l_max = 1
p_max = 1
""")
    out = tmp_path / "exp"
    code = cli_main(["experiment", "mse-vs-cost", "--variant", "deterministic", "--estimator",
                     "cs", "--dim", "2", "--T", "30", "--levels", "1..2", "--config", cfg,
                     "--out", str(out)])
    assert code == 0
    rows = list(csv.DictReader(open(out / "mse_vs_cost.csv")))
    assert {r["estimator"] for r in rows} == {"cs"}
    assert {r["variant"] for r in rows} == {"deterministic"}
    spec = json.loads((out / "mse_vs_cost_spec.json").read_text())
    assert spec["T"] == 30 and spec["d_x"] == 2 and spec["d_y"] == 2
    assert (out / "manifest.json").exists()


def test_experiment_with_explicit_model(tmp_path):
    cfg = write(tmp_path, """
[model]
d_x = 1
d_y = 1
A = [[-1.0]]
C = [[1.0]]
R1 = [[1.0]]
R2 = [[1.0]]
m0 = [2.0]
P0 = [[1.0]]

[experiment]
replicates = 30
p_levels = [0, 1]
""")
    out = tmp_path / "sm"
    assert cli_main(["experiment", "second-moment", "--config", cfg, "--T", "1",
                     "--levels", "0..2", "--particles", "4", "--out", str(out)]) == 0
    spec = json.loads((out / "second_moment_spec.json").read_text())
    assert spec["model_path"].endswith("model.toml")


def test_entry_point_exit_codes(tmp_path):
    run = lambda *a: subprocess.run([sys.executable, "-m", "enkbf_lab", *a], cwd=tmp_path,
                                    capture_output=True, text=True)
    assert run("kbf", "--dim", "1", "--T", "1", "--out", "d").returncode == 0
    r = run("kbf", "--T", "1")
    assert r.returncode == 1 and "usage:" in r.stderr
    write(tmp_path, EXPLODING, "bad.toml")
    assert run("enkbf", "--config", "bad.toml", "--T", "1", "--levels", "3..3").returncode == 2
