import csv
import json

import numpy as np
import pytest

from regen_mfg.cli import main

TINY_CONFIG = """\
[run]
seed = 7

[problem]
variant = lq1
d = 1

[trainer]
iterations = 4
ensemble_size = 400
batch_size = 50
metrics_every = 2
checkpoint_every = 2

[network]
width = 12
depth = 3
test_width = 8
scale_c = 0.5

[metrics]
rc_points = 32
re_points = 32
paths = 32
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture
def finished_run(tmp_path, tiny_config):
    out = tmp_path / "run"
    assert main(["run", str(tiny_config), "--output-dir", str(out)]) == 0
    return out


def json_lines(text):
    return [json.loads(line) for line in text.splitlines() if line.startswith("{")]


def history_without_wall_clock(path):
    with open(path, newline="") as f:
        return [row[:-1] for row in csv.reader(f)]


def test_reference_command_lq1(tmp_path, capsys):
    out = tmp_path / "lq1.csv"
    assert main(["reference", "lq1", "1", str(out)]) == 0
    rows = np.loadtxt(out, delimiter=",", skiprows=1)
    assert np.allclose(rows[:, 1], 1.0, atol=1e-8)
    report = json_lines(capsys.readouterr().out)[-1]
    assert report["J_star"] > 0.625
    sidecar = json.loads((tmp_path / "lq1.json").read_text())
    assert sidecar["J_star"] == report["J_star"]
    assert sidecar["table"] == str(out)


def test_reference_command_systemic_risk(tmp_path):
    out = tmp_path / "sr.csv"
    assert main(["reference", "systemic_risk", "1", str(out)]) == 0
    rows = np.loadtxt(out, delimiter=",", skiprows=1)
    assert rows[-1, 1] == pytest.approx(1.0, abs=1e-12)


def test_reference_command_without_reference(tmp_path):
    assert main(["reference", "target_tracking", "2", str(tmp_path / "tt.csv")]) == 2


def test_run_writes_outputs(finished_run):
    summary = json.loads((finished_run / "summary.json").read_text())
    assert summary["iterations_completed"] == 4
    assert summary["stopped_early"] is False
    assert summary["J_star"] > 0
    header = (finished_run / "metrics.csv").read_text().splitlines()[0]
    assert header == "iteration,pe_loss,pi_objective,RE1,REinf,RC,J_hat,wall_s"
    for name in ("config.resolved.cfg", "reference.csv", "control_profile.csv", "value_landscape.csv",
                 "mean_comparison.csv", "checkpoints/iter_000002.pt", "checkpoints/final.pt", "run.log"):
        assert (finished_run / name).exists(), name


def test_run_is_deterministic(tmp_path, tiny_config, finished_run):
    again = tmp_path / "again"
    assert main(["run", str(tiny_config), "--output-dir", str(again)]) == 0
    assert history_without_wall_clock(again / "metrics.csv") == history_without_wall_clock(
        finished_run / "metrics.csv")
    first = json.loads((finished_run / "summary.json").read_text())
    second = json.loads((again / "summary.json").read_text())
    assert first["parameter_hash"] == second["parameter_hash"]


def test_evaluate_reproduces_final_record(finished_run, capsys):
    capsys.readouterr()
    assert main(["evaluate", str(finished_run)]) == 0
    report = json_lines(capsys.readouterr().out)[-1]
    final = json.loads((finished_run / "summary.json").read_text())["final"]
    assert report["iteration"] == 4
    for key in ("J_hat", "RE1", "REinf", "RC"):
        assert report[key] == pytest.approx(final[key], rel=1e-12)


def test_evaluate_with_other_metric_seed(finished_run, capsys):
    capsys.readouterr()
    assert main(["evaluate", str(finished_run)]) == 0
    default = json_lines(capsys.readouterr().out)[-1]
    assert main(["evaluate", str(finished_run), "--metric-seed", "99"]) == 0
    other = json_lines(capsys.readouterr().out)[-1]
    assert other["RE1"] != default["RE1"]


def test_evaluate_rejects_mismatched_architecture(tmp_path, finished_run):
    wider = tmp_path / "wider.cfg"
    wider.write_text(TINY_CONFIG.replace("width = 12", "width = 16"))
    assert main(["evaluate", str(finished_run), "--config", str(wider)]) == 3


def test_missing_variant_exits_with_usage_code(tmp_path):
    path = tmp_path / "broken.cfg"
    path.write_text(TINY_CONFIG.replace("variant = lq1\n", ""))
    assert main(["run", str(path), "--output-dir", str(tmp_path / "out")]) == 2


def test_missing_checkpoint_exits_with_compatibility_code(tmp_path, tiny_config):
    assert main(["evaluate", str(tmp_path), "--config", str(tiny_config)]) == 3


if __name__ == "__main__":
    pytest.main(["-v"])
