import json
import shutil
import subprocess
import sys
from importlib import resources
from pathlib import Path

import pandas as pd
import pytest

from patrolscope.cli import main
from patrolscope.config import ConfigError, config_hash, load_config, parse_override

FIXTURE = Path(str(resources.files("patrolscope").joinpath("data/fixture")))
RUN = str(FIXTURE / "run.json")


def cli(*args):
    return main([str(a) for a in args])


def test_validate_fixture(tmp_path):
    assert cli("validate", "--config", RUN, "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "validate_report.json").read_text())
    assert rep["pings"]["n_rejects"] == 0 and rep["pings"]["n_kept"] == rep["pings"]["n_rows"]
    rejects = pd.read_csv(tmp_path / "rejects.csv", comment="#")
    assert rejects.empty
    assert not (tmp_path / "FAILED").exists()


def test_missing_upstream_artifact(tmp_path, capsys):
    assert cli("regress", "--config", RUN, "--out", tmp_path) == 1
    err = capsys.readouterr().err
    assert "presence.csv" in err and "patrolscope presence" in err
    failed = (tmp_path / "FAILED").read_text()
    assert "stage=regress" in failed and "presence.csv" in failed


@pytest.fixture(scope="module")
def fixture_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("fixture_run")
    assert cli("all", "--config", RUN, "--out", out) == 0
    return out


def test_all_writes_hashed_artifacts(fixture_run):
    h = config_hash(load_config(RUN))
    for name in ("qualifications.csv", "homes.csv", "shifts.csv", "presence.csv", "regressions.csv"):
        first = (fixture_run / name).read_text().splitlines()[0]
        assert first == f"# config_hash={h}", name
    rep = json.loads((fixture_run / "run_report.json").read_text())
    assert rep["config_hash"] == h
    assert set(rep["stages"]) >= {"validate", "qualify", "homes", "shifts", "presence", "regress",
                                  "validate-city"}
    presence = pd.read_csv(fixture_run / "presence.csv", comment="#")
    assert presence["hours"].sum() > 0


def test_stage_rerun_is_stable(fixture_run, tmp_path):
    before = (fixture_run / "shifts.csv").read_bytes()
    assert cli("shifts", "--config", RUN, "--out", fixture_run) == 0
    assert (fixture_run / "shifts.csv").read_bytes() == before


def test_override_changes_hash_and_output(fixture_run, tmp_path):
    shutil.copytree(fixture_run, tmp_path / "o", dirs_exist_ok=True)
    out = tmp_path / "o"
    assert cli("qualify", "--config", RUN, "--out", out, "--set", "thresholds.station_days_min=50") == 0
    q = pd.read_csv(out / "qualifications.csv", comment="#")
    assert not q["qualified"].any()
    assert (out / "qualifications.csv").read_text().splitlines()[0] != \
        (fixture_run / "qualifications.csv").read_text().splitlines()[0]


def test_schema_errors(tmp_path, capsys):
    assert cli("validate", "--config", RUN, "--out", tmp_path, "--set", "thresholds.shift_min_h=\"x\"") == 1
    assert "thresholds.shift_min_h" in capsys.readouterr().err
    assert cli("validate", "--config", RUN, "--out", tmp_path, "--set", "unknown_key=1") == 1
    assert cli("validate", "--config", tmp_path / "nope.json") == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli("validate", "--config", bad) == 1
    assert cli("validate", "--config", RUN, "--out", tmp_path,
               "--set", "thresholds.shift_min_h=30") == 1


def test_config_rules(tmp_path):
    cfg = load_config(RUN)
    assert cfg["manifest"] == str((FIXTURE / "manifest.json").resolve())
    assert cfg["thresholds"]["station_days_min"] == 5
    base = config_hash(cfg)
    assert config_hash({**cfg, "workers": 16, "output_dir": "/elsewhere"}) == base
    assert config_hash({**cfg, "rng_seed": 99}) != base
    assert parse_override("a.b=3") == (["a", "b"], 3)
    assert parse_override("a=hello") == (["a"], "hello")
    with pytest.raises(ConfigError):
        parse_override("novalue")
    with pytest.raises(ConfigError, match="manifest or a synth"):
        load_config(None, [])


def test_schema_subcommand(capsys):
    assert cli("schema") == 0
    assert json.loads(capsys.readouterr().out)["type"] == "object"


def test_console_script():
    r = subprocess.run([sys.executable, "-m", "patrolscope.cli", "--version"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "patrolscope" in r.stdout
