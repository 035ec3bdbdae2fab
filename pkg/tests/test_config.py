import pytest

from marginals.config import (SEED_ENV, ConfigError, defaults, load_config, parse_config,
                              validate)
from marginals.dist import DistributionSpec


SAMPLE = """\
[run]
seed = 11
N = 300

[dist]
kind = truncated
n = 6
threshold_K = 2.5
inner_kind = multidim_pareto
inner_tail_exponent = 13.0

[model]
p = 3.5

[sweep]
n_grid = 4, 8, 16
early_stop = no
"""


def test_defaults_echo_round_trip():
    cfg = defaults()
    assert parse_config(cfg.to_text()) == cfg


def test_file_values_and_echo_round_trip():
    cfg = parse_config(SAMPLE)
    assert cfg.get("run", "seed") == 11 and cfg.get("sweep", "n_grid") == (4, 8, 16)
    assert cfg.get("sweep", "early_stop") is False
    assert cfg.get("model", "q") is None
    spec = cfg.spec()
    assert spec == DistributionSpec.truncated(DistributionSpec.multidim_pareto(6, 13.0), 2.5)
    echo = cfg.to_text()
    assert "trials_per_point = 40" in echo   # defaults are printed
    assert parse_config(echo) == cfg
    assert cfg.model().q == 14.0


def test_typed_views():
    cfg = parse_config(SAMPLE)
    sw = cfg.sweep()
    assert sw.master_seed == 11 and sw.n_grid == (4, 8, 16) and sw.p == 3.5
    assert cfg.solver().grad_tol == 1e-5
    validate(cfg)


@pytest.mark.parametrize("text,line,field", [
    ("[dist]\nn = x\n", 2, "dist.n"),
    ("[run]\nseed = 1\n\n[bogus]\na = 1\n", 4, "bogus"),
    ("[run]\nseed = 1\nspeed = 3\n", 3, "run.speed"),
    ("[run]\nseed = 1\nseed = 2\n", 3, "run.seed"),
    ("seed = 1\n", 1, None),
    ("[sweep]\nearly_stop = maybe\n", 2, "sweep.early_stop"),
])
def test_diagnostics(text, line, field):
    with pytest.raises(ConfigError) as exc:
        parse_config(text, source="f.ini")
    assert exc.value.line == line
    assert exc.value.field == field
    assert str(exc.value).startswith(f"f.ini:{line}")


@pytest.mark.parametrize("key,value", [("dist.kind", "weird"), ("solver.starts", "2"),
                                       ("run.N", "0"), ("opnorm.target", "l1"),
                                       ("model.q", "3")])
def test_validate_rejects(key, value):
    section, name = key.split(".")
    cfg = parse_config(f"[{section}]\n{name} = {value}\n")
    with pytest.raises(ConfigError):
        validate(cfg)


def test_sweep_view_errors():
    cfg = parse_config("[sweep]\ntrials_per_point = 5\n")
    with pytest.raises(ConfigError, match="sweep"):
        cfg.sweep()


def test_load_config_and_env_seed(tmp_path, monkeypatch):
    p = tmp_path / "c.ini"
    p.write_text("[dist]\nn = 3\n")
    monkeypatch.setenv(SEED_ENV, "77")
    assert load_config(str(p)).get("run", "seed") == 77
    p.write_text("[run]\nseed = 5\n")
    assert load_config(str(p)).get("run", "seed") == 5
    assert load_config(None).get("run", "seed") == 77
    monkeypatch.setenv(SEED_ENV, "abc")
    with pytest.raises(ConfigError):
        load_config(None)
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(str(tmp_path / "missing.ini"))
