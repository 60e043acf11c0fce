import os
import subprocess
import sys

import pytest
from click.testing import CliRunner

from gpje.cli import main
from gpje.config import ConfigError, RunConfig
from gpje.pipeline import read_json

from conftest import CONFIGS, load_config, write_config

SHIPPED = sorted(p.stem for p in CONFIGS.glob("*.toml"))


def _cli(*args):
    return CliRunner().invoke(main, list(args))


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_configs_load_build_and_round_trip(name):
    cfg = RunConfig.load(CONFIGS / f"{name}.toml")
    cfg.build()
    again = RunConfig.loads(cfg.dumps())
    assert again == cfg and again.content_hash() == cfg.content_hash()


def test_unknown_keys_and_bad_toml_are_rejected():
    text = (CONFIGS / "identity_ot.toml").read_text()
    with pytest.raises(ConfigError, match="colour"):
        RunConfig.loads(text.replace("[grid]", "[grid]\ncolour = 3"))
    with pytest.raises(ConfigError):
        RunConfig.loads("name = ")


def test_missing_config_is_a_validation_failure(tmp_path):
    assert _cli("check", "--config", str(tmp_path / "nope.toml")).exit_code == 1


def test_verify_before_solve_is_a_runtime_failure(tmp_path):
    cfg = write_config(load_config("identity_ot", tmp_path / "out", grid__n_r=16, grid__n_theta=16),
                       tmp_path / "c.toml")
    assert _cli("verify", "--config", str(cfg)).exit_code == 2


def test_check_is_deterministic(tmp_path):
    cfg = write_config(load_config("reflection_flat", tmp_path / "out", checks__n_samples=400),
                       tmp_path / "c.toml")
    assert _cli("check", "--config", str(cfg)).exit_code == 0
    first = (tmp_path / "out" / "check.json").read_text()
    assert _cli("check", "--config", str(cfg)).exit_code == 0
    assert (tmp_path / "out" / "check.json").read_text() == first


def test_skip_envelope_uses_bare_field(tmp_path):
    cfg = write_config(load_config("identity_ot", tmp_path / "out", grid__n_r=16, grid__n_theta=16),
                       tmp_path / "c.toml")
    assert _cli("init", "--config", str(cfg), "--force", "--skip-envelope").exit_code == 0
    rep = read_json(tmp_path / "out" / "init.json")
    assert rep["path"] == "bare" and rep["skip_envelope"]


def test_full_pipeline_on_a_small_grid(tmp_path):
    cfg = load_config("identity_ot", tmp_path / "out", grid__n_r=16, grid__n_theta=16,
                      verify__n_samples=20_000, verify__max_mass_mismatch=0.05)
    path = write_config(cfg, tmp_path / "c.toml")
    for stage in ("check", "init", "solve", "verify", "export"):
        res = _cli(stage, "--config", str(path))
        assert res.exit_code == 0, (stage, res.output)
    out = tmp_path / "out"
    for f in ("check.json", "init.json", "u0.csv", "solve.json", "solution.csv", "trace.csv", "verify.json",
              "export/field.csv", "export/boundary.csv", "export/config.toml", "export/export.json"):
        assert (out / f).exists(), f
    assert RunConfig.load(out / "export" / "config.toml") == cfg
    assert read_json(out / "verify.json")["passed"]


def test_thread_variable_is_accepted(tmp_path):
    cfg = write_config(load_config("reflection_flat", tmp_path / "out", checks__n_samples=200),
                       tmp_path / "c.toml")
    env = dict(os.environ, GPJE_THREADS="1")
    res = subprocess.run([sys.executable, "-m", "gpje.cli", "check", "--config", str(cfg)],
                         env=env, capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
