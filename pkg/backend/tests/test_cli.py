# Code purpose: Test config handling, the experiment pipeline and the command-line entry point

import csv
import json
from datetime import timezone

import pytest

from app import models
from app.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    config_hash,
    load_config,
    main,
    run_experiment,
    validate_config,
)
from app.database import SessionLocal
from app.errors import ConfigInvalid
from app.selftest import check_containment_oracle

CLOSEDLOOP = """
name = "tiny_closedloop"
kind = "closedloop"
x0 = [-4.0, 0.5]
T = 3
runs = 2
seed = 11

[system]
id = "double_integrator"

[[controllers]]
kind = "receding"
N = 3
"""

ROA = """
name = "tiny_roa"
kind = "roa"

[[controllers]]
kind = "receding"
N = 3

[roa]
nx = 5
ny = 5
horizons = [3]
"""


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_load_config_and_hash(tmp_path):
    cfg = load_config(_write(tmp_path, "c.toml", CLOSEDLOOP))
    assert cfg.kind == "closedloop"
    assert cfg.controllers[0].N == 3
    assert cfg.sampler.w_law == "uniform"
    again = load_config(_write(tmp_path, "d.toml", CLOSEDLOOP))
    assert config_hash(cfg) == config_hash(again)
    assert config_hash(cfg) != config_hash(cfg.model_copy(update={"seed": 12}))


def test_invalid_configs_are_rejected(tmp_path):
    with pytest.raises(ConfigInvalid):
        load_config(tmp_path / "missing.toml")
    with pytest.raises(ConfigInvalid):
        load_config(_write(tmp_path, "broken.toml", "kind = "))
    with pytest.raises(ConfigInvalid):
        validate_config({"kind": "closedloop", "x0": [0.0, 0.0], "colour": "red"})
    with pytest.raises(ConfigInvalid):
        validate_config({"kind": "closedloop"})
    with pytest.raises(ConfigInvalid):
        validate_config({"kind": "async", "x0": [0.0, 0.0]})
    with pytest.raises(ConfigInvalid):
        validate_config({"kind": "roa", "controllers": [{"kind": "receding", "N": 0}]})


def test_main_exit_codes(tmp_path, capsys):
    assert main(["schema"]) == EXIT_OK
    schema = json.loads(capsys.readouterr().out)
    assert "properties" in schema

    bad = _write(tmp_path, "bad.toml", CLOSEDLOOP + "\nunknown_key = 1\n")
    assert main(["closedloop", "--config", str(bad)]) == EXIT_CONFIG
    good = _write(tmp_path, "good.toml", CLOSEDLOOP)
    assert main(["roa", "--config", str(good)]) == EXIT_CONFIG
    overrides = _write(tmp_path, "overrides.toml", CLOSEDLOOP.replace('id = "double_integrator"', 'id = "double_integrator"\noverrides = { mass = 2.0 }'))
    assert main(["closedloop", "--config", str(overrides), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_closedloop_pipeline(tmp_path):
    cfg = validate_config(
        {
            "name": "pipeline",
            "kind": "closedloop",
            "x0": [-4.0, 0.5],
            "T": 3,
            "runs": 2,
            "seed": 5,
            "controllers": [{"kind": "receding", "N": 3}],
        }
    )
    out = tmp_path / "run"
    run = run_experiment(cfg, out, plots=True)
    assert run.status is models.RunStatus.SUCCEEDED
    label = "receding_N3_scalar"
    for name in (f"runs_{label}.jsonl", f"summary_{label}.csv", "timing.csv", "stats.json", "manifest.json", "plot_closedloop.py"):
        assert (out / name).exists(), name

    lines = (out / f"runs_{label}.jsonl").read_text().splitlines()
    assert [json.loads(line)["seed"] for line in lines] == [5, 6]
    with (out / f"summary_{label}.csv").open() as fh:
        header = next(csv.reader(fh))
    assert header == ["run_id", "step", "x0", "x1", "u0", "cost", "status"]

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == config_hash(cfg)
    assert manifest["seeds"] == [5, 6]
    assert f"runs_{label}.jsonl" in manifest["files"]

    with SessionLocal() as session:
        stored = session.get(models.ExperimentRun, run.id)
        assert stored.status is models.RunStatus.SUCCEEDED
        assert stored.summary_json["stats"][label]["n_runs"] == 2
        assert stored.finished_at is not None
        assert stored.finished_at >= stored.created_at


def test_run_timestamps_are_timezone_aware():
    now = models.utcnow()
    assert now.tzinfo is timezone.utc
    assert now.utcoffset().total_seconds() == 0.0


def test_roa_pipeline(tmp_path):
    cfg = validate_config({"name": "roa", "kind": "roa", "controllers": [{"kind": "receding", "N": 3}], "roa": {"nx": 5, "ny": 5, "horizons": [3]}})
    out = tmp_path / "roa"
    run = run_experiment(cfg, out)
    assert run.status is models.RunStatus.SUCCEEDED
    with (out / "roa_table.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert 0.0 < float(rows[0]["fraction"]) <= 1.0
    masks = json.loads((out / "roa_masks.json").read_text())
    assert len(masks) == 1


def test_roa_via_main(tmp_path):
    path = _write(tmp_path, "roa.toml", ROA)
    assert main(["roa", "--config", str(path), "--out", str(tmp_path / "main_roa")]) == EXIT_OK
    assert (tmp_path / "main_roa" / "roa_table.csv").exists()


def test_containment_selftest_check():
    result = check_containment_oracle(instances=10)
    assert result.passed, result.detail


@pytest.mark.slow
def test_full_selftest(capsys):
    assert main(["selftest"]) == EXIT_OK
    assert "3/3 passed" in capsys.readouterr().out
