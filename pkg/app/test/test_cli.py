import json

import numpy as np
import pytest

from app.cli import create_cli, main
from app.estimation import simulation
from app.estimation.criteria import LinearIndexModel, ThetaDomain, fit_parametric
from app.estimation.data_model import DiscreteMeasure, save_sample
from app.estimation.simulation import censoring_probability
from app.estimation.survival import kaplan_meier_censoring
from app.resources import static_resource
from app.tools import fit_tool, reproduce_tool, simulate_tool
from app.utils.errors import ReplicationFailure
from app.utils.grid_util import parse_grid


@pytest.fixture
def sample_file(tmp_path, design_sample):
    path = tmp_path / "sample.json"
    save_sample(design_sample, path)
    return path


def test_commands_are_registered():
    parser = create_cli()

    assert parser.parse_args(["fit", "--data", "x.json"]).handler is fit_tool.cmd_fit
    assert parser.parse_args(["simulate"]).handler is simulate_tool.cmd_simulate
    assert parser.parse_args(["reproduce", "--table", "1"]).handler is reproduce_tool.cmd_reproduce


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0
    assert static_resource.get_version() in capsys.readouterr().out


def test_parametric_fit_matches_library(sample_file, design_sample, capsys):
    code = main(["fit", "--data", str(sample_file), "--model", "parametric", "--intercept", "5"])

    assert code == 0
    data = json.loads(capsys.readouterr().out)
    w0 = DiscreteMeasure.uniform(parse_grid(static_resource.DEFAULT_WEIGHT_SUPPORT))
    fit = kaplan_meier_censoring(design_sample)
    expected = fit_parametric(LinearIndexModel(4, 5.0), w0, design_sample, fit, ThetaDomain.box(4))
    assert data["n"] == 100
    assert data["model"] == "parametric"
    assert np.allclose(data["theta_hat"], expected.theta_hat)
    assert np.array(data["variance_matrix"]).shape == (3, 3)


def test_adaptive_fit_writes_report(sample_file, tmp_path):
    out = tmp_path / "out"

    code = main(["fit", "--data", str(sample_file), "--weights", "adaptive", "--bandwidth", "0.5", "--out", str(out)])

    assert code == 0
    data = json.loads((out / "fit_report.json").read_text(encoding="utf-8"))
    assert data["model"] == "single-index"
    assert len(data["theta_hat"]) == 4
    assert data["theta_hat"][0] == 1.0
    assert data["chosen_bandwidth"] == 0.5
    assert data["mse_estimate"] is not None
    assert len(data["diagnostics"]["candidate_mse"]) == 256


def test_text_fit_report(sample_file, capsys):
    code = main(["fit", "--data", str(sample_file), "--model", "parametric", "--intercept", "5", "--format", "text"])

    assert code == 0
    text = capsys.readouterr().out
    assert "θ1" in text
    assert "准则值" in text


def test_missing_data_file(tmp_path):
    out = tmp_path / "out"
    code = main(["fit", "--data", str(tmp_path / "missing.json"), "--out", str(out)])

    assert code == 2
    assert not (out / "fit_report.json").exists()


def test_auto_bandwidth_requires_grid(sample_file):
    assert main(["fit", "--data", str(sample_file), "--bandwidth", "auto"]) == 2


def test_invalid_arguments_exit_with_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["reproduce", "--table", "4"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["simulate", "--no-such-flag"])
    assert e.value.code == 2


def test_simulate_is_byte_identical_across_runs(tmp_path):
    args = ["simulate", "--pipeline", "parametric", "--reps", "2", "--n", "20", "--seed", "7"]

    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--jobs", "2"]) == 0

    for name in ("replications.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text(encoding="utf-8"))
    assert summary["config"]["seed"] == 7
    assert summary["summary"]["replications"] == 2


def test_simulate_requires_seed_when_asked():
    assert main(["simulate", "--pipeline", "parametric", "--reps", "1", "--n", "10", "--require-seed"]) == 2


def test_simulate_reads_config_file(tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"n": 15, "reps": 5, "pipeline": "parametric", "seed": 3}))

    code = main(["simulate", "--config", str(config), "--reps", "2"])

    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["config"]["n"] == 15
    assert payload["config"]["reps"] == 2
    assert payload["config"]["seed"] == 3


def test_simulate_rejects_unknown_config_field(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"n": 15, "colour": "red"}))
    assert main(["simulate", "--config", str(config)]) == 2


def test_reproduce_announces_configs_and_passes(published_replications, tmp_path, capsys):
    seen = published_replications()
    out = tmp_path / "out"

    code = main(["reproduce", "--table", "1", "--seed", "9", "--reps", "3", "--n", "40", "--out", str(out)])

    assert code == 0
    err = capsys.readouterr().err
    assert err.count("[config] SimulationConfig") == 2
    assert "censoring_scale" in err
    assert "h_grid" in err
    assert [c.pipeline for c in seen] == ["fixed", "adaptive"]
    for config in seen:
        assert (config.n, config.reps, config.seed) == (40, 3, 9)
        assert censoring_probability(config) == pytest.approx(0.30, abs=1e-6)
    text = (out / "table1.txt").read_text(encoding="utf-8")
    assert "FAIL" not in text
    assert "注:" in text
    assert (out / "table1_w0_replications.csv").exists()


def test_reproduce_exits_with_acceptance_failure(published_replications, capsys):
    published_replications(bias_shift=1.0)

    code = main(["reproduce", "--table", "1", "--seed", "9", "--reps", "3", "--n", "40"])

    assert code == 5
    assert "FAIL" in capsys.readouterr().out


def test_reproduce_exits_when_replications_fail(monkeypatch):
    def failing(config, jobs=1):
        raise ReplicationFailure("失败的重复过多")

    monkeypatch.setattr(simulation, "run_replications", failing)

    assert main(["reproduce", "--table", "1", "--seed", "9", "--reps", "3", "--n", "40"]) == 4
