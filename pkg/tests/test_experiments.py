import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from spclab import cli
from spclab import experiments as ex
from spclab.errors import ConfigError, InvalidInputError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def config(name, **changes):
    raw = json.loads((CONFIGS / f"{name}.json").read_text())
    raw.update(changes)
    return raw


def test_fit_loglog_examples():
    xs = np.geomspace(1e-3, 1.0, 9)
    slope, intercept, ci = ex.fit_loglog(xs, xs ** 2)
    assert slope == pytest.approx(2.0, abs=1e-12) and ci < 1e-10
    noisy = 3.0 * xs ** 0.8 * (1 + 0.01 * np.random.default_rng(0).standard_normal(9))
    slope, intercept, ci = ex.fit_loglog(xs, noisy)
    assert slope == pytest.approx(0.8, abs=0.02)
    assert intercept == pytest.approx(np.log(3.0), abs=0.05)
    assert ex.fit_loglog(xs, np.full(9, 2.0))[0] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("xs,ys", [([1, 2, 3, 4], [1, 2, 3, 4]), ([1, 2, 3, 4, 0], [1, 1, 1, 1, 1]),
                                   ([1, 2, 3, 4, 5], [1, 1, -1, 1, 1])])
def test_fit_loglog_rejects(xs, ys):
    with pytest.raises(InvalidInputError):
        ex.fit_loglog(xs, ys)


@pytest.mark.parametrize("change", [
    {"delta_grid": [1e-3, 1e-2, 1e-1]},
    {"delta_grid": [1e-1, -1e-2]},
    {"n_mc": 50},
    {"alpha_policy": "cheapest"},
    {"alpha_policy": {"grid": [1.0]}},
    {"schema_version": 2},
    {"instance": None},
])
def test_config_validation(change):
    with pytest.raises(ConfigError):
        ex.ExperimentConfig.from_dict(config("power_beta1", **change))


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        ex.load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        ex.load_config(bad)


def test_default_delta_grid():
    raw = config("power_beta1")
    del raw["delta_grid"]
    cfg = ex.ExperimentConfig.from_dict(raw)
    np.testing.assert_allclose(cfg.delta_grid, np.geomspace(1e-1, 1e-5, 9))


@pytest.mark.parametrize("name,expected", [("power_beta1", 0.8), ("power_beta04", 4 * 0.4 / 3.8),
                                           ("power_a1_p05_beta1", 1.0)])
def test_power_rate_studies(name, expected):
    res = ex.run_rate_study(ex.ExperimentConfig.from_dict(config(name)))
    assert len(res.rows) == 9 and res.fitted_rows == 8 and not res.failures
    assert res.theoretical_exponent == pytest.approx(expected)
    assert res.fitted_exponent == pytest.approx(expected, abs=0.05)
    assert res.regressor == "log_delta"


def test_heat_rate_study_uses_log_regressor():
    res = ex.run_rate_study(ex.ExperimentConfig.from_dict(config("heat_beta05")))
    assert res.regressor == "loglog_inv_delta"
    assert res.fitted_exponent == pytest.approx(-0.5, abs=0.1)


def test_rate_fit_stable_under_refinement():
    raw = config("power_beta1")
    coarse = ex.run_rate_study(ex.ExperimentConfig.from_dict(raw))
    raw["delta_grid"] = dict(raw["delta_grid"], num=17)
    fine = ex.run_rate_study(ex.ExperimentConfig.from_dict(raw))
    assert abs(fine.fitted_exponent - coarse.fitted_exponent) < coarse.exponent_ci_halfwidth


def test_rate_fit_stable_under_truncation():
    raw = config("power_beta1")
    base = ex.run_rate_study(ex.ExperimentConfig.from_dict(raw))
    raw["instance"] = dict(raw["instance"], N=4000)
    doubled = ex.run_rate_study(ex.ExperimentConfig.from_dict(raw))
    assert abs(doubled.fitted_exponent - base.fitted_exponent) < 0.02


def test_fixed_grid_policy():
    raw = config("power_beta1", alpha_policy={"fixed_grid": {"start": 1e-12, "stop": 1.0, "num": 121}})
    raw["instance"] = dict(raw["instance"], N=500)
    # worst case over the source set; a single smooth mode would beat the rate
    raw["smoothness"] = {"sobolev_beta": 1.0, "v": "extremal"}
    res = ex.run_rate_study(ex.ExperimentConfig.from_dict(raw))
    assert res.fitted_exponent == pytest.approx(0.8, abs=0.05)


def test_high_case_on_rotated_instance_needs_lifting():
    raw = config("rotated_dominance", smoothness={"phi": {"family": "power", "c": 1.0, "q": 2.5}})
    cfg = ex.ExperimentConfig.from_dict(raw)
    with pytest.raises(ConfigError):
        ex.build_spec(cfg, ex.build_instance(cfg))


def test_dominance_sweep_rotated():
    reports = ex.run_dominance_sweep(ex.ExperimentConfig.from_dict(config("rotated_dominance")))
    assert [r.quantity for r in reports] == ["bias", "spread", "spc"]
    assert all(r.dominated and r.worst_ratio <= 1 for r in reports)
    assert reports[1].alpha_grid.size == 100


def run_cli(tmp_path, *args):
    return cli.main([*args, "--output", str(tmp_path / "out")])


def test_cli_certify_commuting(tmp_path, capsys):
    assert run_cli(tmp_path, "certify", "--config", str(CONFIGS / "commuting_certify.json")) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["m"] == pytest.approx(1.0, rel=1e-12)
    assert payload["M"] == pytest.approx(1.0, rel=1e-12)


def test_cli_rate_study_outputs(tmp_path):
    assert run_cli(tmp_path, "rate-study", "--config", str(CONFIGS / "power_beta1.json")) == 0
    lines = (tmp_path / "out.csv").read_text().splitlines()
    assert lines[0] == ",".join(ex.RATE_COLUMNS) and len(lines) == 10
    summary = json.loads((tmp_path / "out.json").read_text())
    assert summary["schema_version"] == ex.SCHEMA_VERSION
    assert summary["fitted_exponent"] == pytest.approx(0.8, abs=0.05)


def test_cli_spc_and_bound_check(tmp_path, capsys):
    cfg = str(CONFIGS / "rotated_dominance.json")
    assert run_cli(tmp_path, "spc", "--config", cfg, "--alpha", "1e-3", "--delta", "0.01") == 0
    row = json.loads(capsys.readouterr().out)
    assert row["spc"] == pytest.approx(row["bias_sq"] + row["variance"] + row["spread"], rel=1e-12)
    assert run_cli(tmp_path, "bound-check", "--config", cfg) == 0
    for q in ("bias", "spread", "spc"):
        assert (tmp_path / f"out_{q}.csv").exists()


def test_cli_dominance_failure_exit_code(tmp_path, monkeypatch):
    real = ex.run_dominance_sweep
    monkeypatch.setattr(ex, "run_dominance_sweep", lambda cfg: real(cfg, link_scale=0.9))
    raw = config("commuting_certify", smoothness={"sobolev_beta": 2.0, "v": "extremal"})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(raw))
    assert run_cli(tmp_path, "bound-check", "--config", str(path)) == 1


def test_cli_config_errors(tmp_path, capsys):
    assert run_cli(tmp_path, "certify", "--config", str(tmp_path / "nope.json")) == 2
    assert "code=invalid_config" in capsys.readouterr().err
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(config("power_beta1", n_mc=10)))
    assert run_cli(tmp_path, "rate-study", "--config", str(path)) == 2


def test_cli_determinism_across_workers(tmp_path):
    raw = config("power_beta1", n_mc=500, seed=3)
    raw["instance"] = dict(raw["instance"], N=200)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(raw))
    outs = []
    for k, workers in enumerate(("1", "1", "4")):
        prefix = tmp_path / f"run{k}"
        assert cli.main(["rate-study", "--config", str(path), "--workers", workers,
                         "--output", str(prefix)]) == 0
        outs.append((prefix.with_suffix(".csv")).read_bytes())
    assert outs[0] == outs[1] == outs[2]
    prefix = tmp_path / "reseeded"
    cli.main(["rate-study", "--config", str(path), "--seed", "4", "--output", str(prefix)])
    assert prefix.with_suffix(".csv").read_bytes() != outs[0]


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "spclab", "certify", "--config",
                          str(CONFIGS / "commuting_certify.json"), "--output", str(tmp_path / "o")],
                         capture_output=True, text=True)
    assert out.returncode == 0 and '"m"' in out.stdout
