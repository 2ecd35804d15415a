import json

import pytest

from cpmpc.cli import main

SMALL = {"n_train": 60, "n_calib": 20, "n_test": 4, "n_episodes": 1, "delta": 0.2,
         "solver": {"random_starts": 1}}


@pytest.fixture
def config(tmp_path):
    def write(data, name="cfg.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return str(path)
    return write


def test_pipeline(tmp_path, config, capsys):
    cfg = config(SMALL)
    data, model, regions = tmp_path / "data", tmp_path / "model.json", tmp_path / "regions"
    assert main(["generate-data", "--config", cfg, "--out", str(data)]) == 0
    assert main(["fit-predictor", "--config", cfg, "--data", str(data), "--out", str(model)]) == 0
    common = ["--config", cfg, "--data", str(data), "--model", str(model)]
    assert main(["calibrate", *common, "--out", str(regions)]) == 0
    capsys.readouterr()
    assert main(["coverage", *common, "--regions", str(regions)]) == 0
    cov = json.loads(capsys.readouterr().out)
    assert cov["n_test"] == 4
    steps = tmp_path / "steps.jsonl"
    assert main(["run", *common, "--regions", str(regions), "--controller", "proposed",
                 "--seed", "3", "--out", str(steps)]) == 0
    assert len(steps.read_text().splitlines()) == 21


def test_experiment_and_report(tmp_path, config, capsys):
    out = tmp_path / "exp"
    assert main(["experiment", "--config", config(SMALL), "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    assert json.loads(capsys.readouterr().out)["recomputed_matches"] is True


def test_report_detects_tampering(tmp_path, config, capsys):
    out = tmp_path / "exp"
    main(["experiment", "--config", config(SMALL), "--out", str(out)])
    path = out / "episodes.jsonl"
    records = [json.loads(line) for line in path.read_text().splitlines()]
    records[0]["realized_c"] = -1.0
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    assert main(["report", str(out)]) == 1
    # a truncated log is reported, not a crash
    path.write_text("".join(json.dumps(r) + "\n" for r in records[:-1]))
    assert main(["report", str(out)]) == 1


def test_report_detects_coverage_tampering(tmp_path, config):
    out = tmp_path / "exp"
    main(["experiment", "--config", config(SMALL), "--out", str(out)])
    cov = out / "coverage.csv"
    lines = cov.read_text().splitlines()
    # claim a miss at planning time 0 for the first trajectory
    fields = lines[1].split(",")
    fields[3] = (fields[3] + " 0").strip() if "0" not in fields[3].split() else ""
    cov.write_text("\n".join([lines[0], ",".join(fields), *lines[2:]]) + "\n")
    assert main(["report", str(out)]) == 1


def test_unknown_key_is_config_error(config, tmp_path, capsys):
    assert main(["calibrate", "--config", config({**SMALL, "alpha": 0.1}),
                 "--out", str(tmp_path / "r")]) == 2
    assert "alpha" in capsys.readouterr().err


def test_bad_value_is_config_error(config, tmp_path):
    assert main(["calibrate", "--config", config({**SMALL, "delta": 2}),
                 "--out", str(tmp_path / "r")]) == 2


def test_calibration_infeasible(config, tmp_path, capsys):
    cfg = config({**SMALL, "n_calib": 5, "delta": 0.1})
    assert main(["calibrate", "--config", cfg, "--out", str(tmp_path / "r")]) == 3
    assert "n >= 9" in capsys.readouterr().err


def test_infeasible_at_start(config):
    # one agent parked on the target blocks the terminal ball from the first step
    target = [-1.8, 1.0]
    agents = {"start_mean": [target], "start_std": [0.01], "goal": [target], "speed": [0.1],
              "noise_std": 0.01}
    cfg = config({**SMALL, "agents": agents})
    assert main(["run", "--config", cfg, "--controller", "proposed", "--seed", "0"]) == 4


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["run", "--controller", "fancy", "--seed", "1"])
    assert exc.value.code == 2
