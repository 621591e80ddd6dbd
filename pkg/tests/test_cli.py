import json

import numpy as np
import pytest

from rse_heat.cli import EXIT_BLOWUP, EXIT_GATE, EXIT_OK, EXIT_STALE, EXIT_USAGE, main
from rse_heat.config import ConfigError, ExperimentConfig

FREE = {
    "environment": {"kind": "zero"},
    "grid": {"n_cells": 8},
    "dynamics": {"dt": 0.001, "T": 1.0, "n_checkpoints": 4},
    "ensemble": {"n_env": 6, "n_noise": 40, "master_seed": 11, "env_batch": 2},
    "analysis": {"n_pi": 500, "n_bootstrap": 50},
    "validation": {"n_samples": 1000, "n_shift_checks": 20, "n_report_samples": 200},
}


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg, indent=2))
    return p


def with_env(**env):
    cfg = json.loads(json.dumps(FREE))
    cfg["environment"] = env
    return cfg


def test_free_field_full_pipeline(tmp_path):
    out = tmp_path / "out"
    assert main(["full", "--config", str(write(tmp_path, FREE)), "--out", str(out), "-q"]) == EXIT_OK
    for name in ("validation.json", "checkpoints.csv", "samples.csv", "run_meta.json", "diffusivity.json",
                 "clt_metric.csv", "ks.json", "plotdata/var_mean_mode.csv", "plotdata/clt_metric.csv",
                 "plotdata/fluctuation.csv"):
        assert (out / name).exists(), name
    h = ExperimentConfig.from_dict(FREE).config_hash
    for name in ("checkpoints.csv", "samples.csv", "clt_metric.csv", "plotdata/fluctuation.csv"):
        assert (out / name).read_text().startswith(f"# config_hash={h}, master_seed=11\n")
    for name in ("validation.json", "run_meta.json", "diffusivity.json", "ks.json"):
        doc = json.loads((out / name).read_text())
        assert doc["config_hash"] == h and doc["master_seed"] == 11
    rep = json.loads((out / "diffusivity.json").read_text())
    assert rep["lower_C"] == 1.0 and rep["passed"]
    assert abs(rep["a2_hat"] - 1) <= 3 * rep["se"]
    assert json.loads((out / "ks.json").read_text())["pass"]
    rows = np.loadtxt(out / "checkpoints.csv", delimiter=",", skiprows=2)
    assert rows[-1, 1] / rows[-1, 0] == pytest.approx(1.0, abs=3 * rows[-1, 2] / rows[-1, 0])
    assert list(rows[-1, -2:]) == [6, 40]
    metric = np.loadtxt(out / "clt_metric.csv", delimiter=",", skiprows=2)
    assert np.all(np.isfinite(metric)) and np.all(metric[:, 1:5] > 0)


def test_checkpoint_columns(tmp_path):
    out = tmp_path / "o"
    main(["simulate", "--config", str(write(tmp_path, FREE)), "--out", str(out), "--skip-validate", "-q"])
    lines = (out / "checkpoints.csv").read_text().splitlines()
    assert lines[1] == (
        "t,var_mean_mode,var_mean_mode_se,fluct_var_cell_01,fluct_var_cell_05,"
        "fluct_var_cell_09,fluct_h_norm_sq,n_env,n_noise"
    )
    assert (out / "samples.csv").read_text().splitlines()[1] == "t,env_index,noise_index,mean_mode"
    assert not (out / "validation.json").exists()


def test_same_seed_different_workers_byte_identical(tmp_path):
    cfg = write(tmp_path, with_env(kind="periodic", modes=[{"m": 1, "amplitude": 0.5}]))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", str(cfg), "--out", str(a), "--workers", "1", "-q"]) == EXIT_OK
    assert main(["simulate", "--config", str(cfg), "--out", str(b), "--workers", "3", "-q"]) == EXIT_OK
    for name in ("checkpoints.csv", "samples.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_seed_override_changes_outputs(tmp_path):
    cfg = write(tmp_path, FREE)
    a, b = tmp_path / "a", tmp_path / "b"
    main(["simulate", "--config", str(cfg), "--out", str(a), "--skip-validate", "-q"])
    main(["simulate", "--config", str(cfg), "--out", str(b), "--skip-validate", "--seed", "12", "-q"])
    assert (a / "samples.csv").read_bytes() != (b / "samples.csv").read_bytes()
    assert (b / "samples.csv").read_text().startswith("# config_hash=")
    assert "master_seed=12" in (b / "samples.csv").read_text().splitlines()[0]


def test_workers_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("RSE_HEAT_WORKERS", "2")
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(write(tmp_path, FREE)), "--out", str(out), "--skip-validate", "-q"]) == 0


def test_imposter_fails_validation(tmp_path):
    cfg = with_env(kind="periodic", modes=[{"m": 1, "amplitude": 0.5}], divfree={"kind": "imposter_gradient"})
    cfg["grid"]["n_cells"] = 16
    cfg["validation"]["n_samples"] = 200_000
    out = tmp_path / "o"
    assert main(["validate", "--config", str(write(tmp_path, cfg)), "--out", str(out), "-q"]) == EXIT_GATE
    doc = json.loads((out / "validation.json").read_text())
    assert not doc["gates"]["divergence_free"] and doc["gates"]["shift_covariance"]
    # simulate refuses to run on a failed validation
    assert main(["simulate", "--config", str(write(tmp_path, cfg)), "--out", str(out), "-q"]) == EXIT_GATE
    assert not (out / "samples.csv").exists()


def test_stream_drift_validates(tmp_path):
    cfg = with_env(kind="periodic", modes=[{"m": 1, "amplitude": 0.5}], divfree={"modes": [1, 2], "amplitude": 0.1})
    cfg["validation"]["n_samples"] = 100_000
    out = tmp_path / "o"
    assert main(["validate", "--config", str(write(tmp_path, cfg)), "--out", str(out), "-q"]) == EXIT_OK


def test_negative_dt_is_usage_error(tmp_path, capsys):
    cfg = json.loads(json.dumps(FREE))
    cfg["dynamics"]["dt"] = -0.1
    out = tmp_path / "o"
    assert main(["validate", "--config", str(write(tmp_path, cfg)), "--out", str(out)]) == EXIT_USAGE
    assert not out.exists()
    err = capsys.readouterr().err
    assert "dynamics.dt" in err and "line" in err


def test_single_replicas_is_configuration_error(tmp_path):
    cfg = json.loads(json.dumps(FREE))
    cfg["ensemble"]["n_env"] = cfg["ensemble"]["n_noise"] = 1
    assert main(["simulate", "--config", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_bad_arguments():
    assert main(["simulate"]) == EXIT_USAGE
    assert main(["explode", "--config", "x"]) == EXIT_USAGE


def test_missing_config_file(tmp_path):
    assert main(["validate", "--config", str(tmp_path / "nope.json")]) == EXIT_USAGE


def test_analyze_rejects_stale_inputs(tmp_path):
    out = tmp_path / "o"
    main(["simulate", "--config", str(write(tmp_path, FREE)), "--out", str(out), "--skip-validate", "-q"])
    changed = json.loads(json.dumps(FREE))
    changed["dynamics"]["T"] = 2.0
    assert main(["analyze", "--config", str(write(tmp_path, changed, "c2.json")), "--out", str(out), "-q"]) == EXIT_STALE
    assert main(["analyze", "--config", str(write(tmp_path, FREE)), "--out", str(out), "--seed", "99", "-q"]) == EXIT_STALE
    assert not (out / "diffusivity.json").exists()
    # analysis-only settings may change without a rerun
    tweaked = json.loads(json.dumps(FREE))
    tweaked["analysis"]["n_bootstrap"] = 30
    assert main(["analyze", "--config", str(write(tmp_path, tweaked, "c3.json")), "--out", str(out), "-q"]) == EXIT_OK


def test_ks_skipped_for_small_runs(tmp_path):
    cfg = json.loads(json.dumps(FREE))
    cfg["ensemble"]["n_noise"] = 10
    out = tmp_path / "o"
    assert main(["full", "--config", str(write(tmp_path, cfg)), "--out", str(out), "-q"]) in (EXIT_OK, EXIT_GATE)
    doc = json.loads((out / "ks.json").read_text())
    assert doc["pass"] is None and "skipped" in doc
    assert "ks" not in json.loads((out / "diffusivity.json").read_text())["gates"]


def test_analyze_without_simulation(tmp_path):
    assert main(["analyze", "--config", str(write(tmp_path, FREE)), "--out", str(tmp_path / "empty"), "-q"]) == EXIT_STALE


def test_blow_up_removes_partial_outputs(tmp_path, monkeypatch):
    import rse_heat.dynamics as dyn

    monkeypatch.setattr(dyn, "BLOW_UP", 1e-3)
    out = tmp_path / "o"
    out.mkdir()
    (out / "samples.csv").write_text("old")
    code = main(["simulate", "--config", str(write(tmp_path, FREE)), "--out", str(out), "--skip-validate", "-q"])
    assert code == EXIT_BLOWUP
    assert not (out / "samples.csv").exists() and not (out / "checkpoints.csv").exists()


@pytest.mark.parametrize(
    "mutate, path",
    [
        (lambda c: c.update(extra={}), "extra"),
        (lambda c: c["grid"].update(cells=3), "grid.cells"),
        (lambda c: c["environment"].update(kind="spiral"), "environment.kind"),
        (lambda c: c["environment"].update(kind="periodic", modes=[{"m": 1, "amp": 1}]), "environment.modes[0].amp"),
        (lambda c: c["dynamics"].update(scheme="rk4"), "dynamics.scheme"),
        (lambda c: c["dynamics"].update(checkpoints=[0.5, 0.2]), "dynamics.checkpoints"),
        (lambda c: c["analysis"].update(battery=["nope"]), "analysis.battery"),
        (lambda c: c["ensemble"].update(n_env=2.5), "ensemble.n_env"),
    ],
)
def test_config_diagnostics(mutate, path):
    cfg = json.loads(json.dumps(FREE))
    mutate(cfg)
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_text(json.dumps(cfg, indent=2))
    assert info.value.path == path


def test_config_syntax_error_has_line():
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_text('{\n  "grid": {"n_cells": 8,}\n}')
    assert info.value.line == 2


def test_config_quasiperiodic_and_hash():
    cfg = ExperimentConfig.from_dict(
        {"environment": {"kind": "quasiperiodic", "modes": [[{"m": 1, "amplitude": 0.3}], [{"m": 2, "amplitude": 0.1}]]}}
    )
    assert cfg.model.d == 2
    assert cfg.model.frequencies[1] == pytest.approx(np.sqrt(2))
    assert cfg.config_hash == ExperimentConfig.from_dict(cfg.data).config_hash
    assert cfg.with_seed(5).config_hash != cfg.config_hash
    out = dict(cfg.data)
    out["output"] = {"directory": "elsewhere", "samples": False}
    assert ExperimentConfig.from_dict(out).config_hash == cfg.config_hash
