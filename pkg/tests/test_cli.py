import json

import pytest

from catconfine.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    ExperimentConfig,
    load_recipe,
    main,
    read_ledger,
    recipe_names,
    run_experiment,
    validate_config,
)
from catconfine.errors import ConfigError, MemoryBudgetError

SPEC_CFG = {"schema_version": 1, "experiment": "spectrum", "params": {"scheme": "combined_kerr", "n_max": 4},
            "grid": {"nbar": [2, 3]}, "seed": 1}


@pytest.fixture
def ledger(tmp_path, monkeypatch):
    monkeypatch.setenv("CATCONFINE_CACHE_DIR", str(tmp_path / "cache"))
    return tmp_path / "cache" / "ledger.jsonl"


def _body(path):
    return [l for l in path.read_text().splitlines() if not l.startswith("#")]


def test_validation_reports_field_paths():
    bad = {**SPEC_CFG, "experiment": "idle-bitflip", "noise": {"kappa1": -1.0}}
    errs = validate_config(bad)["errors"]
    assert ("noise.kappa1", "must be nonnegative") in errs
    with pytest.raises(ConfigError) as ei:
        ExperimentConfig.from_dict(bad)
    assert ei.value.args and "nonnegative" in str(ei.value)


def test_validation_rejects_unknown_axis_and_scheme():
    errs = dict(validate_config({**SPEC_CFG, "grid": {"nbar": [2], "T": [1]}})["errors"])
    assert "grid.T" in errs
    errs = dict(validate_config({**SPEC_CFG, "grid": {"nbar": [2], "scheme": ["magic"]}})["errors"])
    assert "grid.scheme[0]" in errs


def test_dim_warning_suggests_value():
    rep = validate_config({**SPEC_CFG, "dim": 5})
    assert not rep["errors"]
    (path, msg), = rep["warnings"]
    assert path == "dim" and "suggested dim" in msg


def test_empty_grid_exits_with_config_error(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({**SPEC_CFG, "grid": {"nbar": []}}))
    assert main(["spectrum", "--config", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "grid.nbar" in capsys.readouterr().err


def test_subcommand_mismatch_is_config_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(SPEC_CFG))
    assert main(["zgate", "--config", str(p)]) == EXIT_CONFIG


def test_validate_subcommand(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(SPEC_CFG))
    assert main(["validate", "--config", str(p)]) == EXIT_OK
    assert "ok" in capsys.readouterr().out


def test_run_is_deterministic_and_uses_ledger(tmp_path, ledger):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    r1 = run_experiment(SPEC_CFG, out1, workers=1)
    assert not any(r.cached for r in r1)
    assert len(read_ledger(ledger)) == 2
    r2 = run_experiment(SPEC_CFG, out2, workers=1)
    assert all(r.cached for r in r2)
    assert _body(out1 / "spectrum.csv") == _body(out2 / "spectrum.csv")
    r3 = run_experiment(SPEC_CFG, tmp_path / "c", workers=1, force=True)
    assert not any(r.cached for r in r3)
    assert _body(out1 / "spectrum.csv") == _body(tmp_path / "c" / "spectrum.csv")
    header = (out1 / "spectrum.csv").read_text().splitlines()[0]
    assert header.startswith("# catconfine") and "experiment=spectrum" in header


def test_output_location_does_not_change_hash():
    a = ExperimentConfig.from_dict({**SPEC_CFG, "output": "x"})
    b = ExperimentConfig.from_dict({**SPEC_CFG, "output": "y"})
    c = ExperimentConfig.from_dict({**SPEC_CFG, "seed": 2})
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_points_cartesian_product():
    cfg = ExperimentConfig.from_dict({**SPEC_CFG, "grid": {"nbar": [2, 3], "scheme": ["combined_kerr", "combined_tpe"]}})
    assert len(cfg.points()) == 4


def test_memory_budget_failure(tmp_path, ledger, capsys):
    cfg = {"schema_version": 1, "experiment": "cnot", "params": {"nbar": 50, "scheme": "dissipative"},
           "grid": {"T": [1.0]}}
    with pytest.raises(MemoryBudgetError):
        run_experiment(cfg, tmp_path, workers=1)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    assert main(["cnot", "--config", str(p), "--out", str(tmp_path)]) == EXIT_RUNTIME
    assert "runtime failure" in capsys.readouterr().err


def test_recipes_validate_cleanly():
    names = recipe_names()
    assert len(names) >= 15
    for n in names:
        rep = validate_config(load_recipe(n))
        assert rep["errors"] == [] and rep["warnings"] == [], n


def test_circuit_params_recipe_outputs(tmp_path, ledger):
    assert main(["circuit-params", "--recipe", "circuit-params", "--out", str(tmp_path), "--workers", "1"]) == EXIT_OK
    data = json.loads((tmp_path / "couplings.json").read_text())
    assert data["report"]["pass"]
    assert "PASS" in (tmp_path / "hierarchy.txt").read_text()
    assert (tmp_path / "circuit-params.csv").exists()


def test_zgate_run_writes_rows(tmp_path, ledger):
    cfg = {"schema_version": 1, "experiment": "zgate", "params": {"nbar": 2, "scheme": "dissipative"},
           "grid": {"T": [1.0, 2.0]}}
    recs = run_experiment(cfg, tmp_path, workers=1)
    rows = [r for rec in recs for r in rec.outputs["rows"]]
    assert rows[0]["p_Z"] > rows[1]["p_Z"] > 0
