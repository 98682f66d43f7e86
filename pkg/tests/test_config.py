import math

import pytest
from hypothesis import given, strategies as st

from sparsegx import config as cf


def test_defaults():
    h = cf.default_hyperparameters()
    assert (h.r, h.s) == (0.001, 20.0)
    assert (h.m, h.a) == (0.9, 10.0)
    assert (h.b, h.tau1) == (8.0, 100.0)
    assert (h.tau_shape, h.tau_rate) == (2.5, 0.5)
    assert (h.psi_shape, h.psi_rate) == (12.5, 0.05)
    c = cf.McmcControl()
    assert (c.burn_in, c.samples, c.thin) == (10_000, 100_000, 1)


def test_validate_defaults_ok():
    assert cf.validate(cf.default_hyperparameters(), cf.McmcControl()) == []


def test_validate_messages():
    assert any("r ∉ (0,1)" in v for v in cf.validate(cf.HyperParameters(r=1.5)))
    assert any("samples ≥ 1" in v for v in cf.validate(cf.HyperParameters(), cf.McmcControl(samples=0)))


def test_validate_reports_every_violation():
    bad = cf.HyperParameters(r=0.0, s=-1.0, m=1.0, a=0.0, tau1=0.0, psi_rate=0.0)
    names = " ".join(cf.validate(bad))
    for field in ("r ", "s ", "m ", "a ", "tau1", "psi_rate"):
        assert field in names


def test_validate_overrides():
    c = cf.McmcControl(fixed_rho=(math.nan, 1.5))
    assert cf.validate(cf.HyperParameters(), c)


def test_default_round_trip_bit_exact():
    cfg = cf.Config()
    assert cf.loads_config(cf.dumps_config(cfg)) == cfg


@given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-3, 1e3), st.integers(0, 2 ** 63))
def test_round_trip_arbitrary(r, s, seed):
    cfg = cf.Config(hyperparameters=cf.HyperParameters(r=r, s=s),
                    mcmc=cf.McmcControl(seed=seed, fixed_tau=(math.nan, 0.5)))
    back = cf.loads_config(cf.dumps_config(cfg))
    assert back.hyperparameters == cfg.hyperparameters
    assert back.mcmc.seed == seed
    assert math.isnan(back.mcmc.fixed_tau[0]) and back.mcmc.fixed_tau[1] == 0.5


def test_unknown_keys_rejected():
    with pytest.raises(cf.ConfigError, match="unknown key"):
        cf.loads_config("[mcmc]\nburnin = 5\n")
    with pytest.raises(cf.ConfigError, match="unknown configuration section"):
        cf.loads_config("[sampler]\nx = 1\n")


def test_partial_file_keeps_defaults(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[hyperparameters]\nr = 0.01\n[evolution]\nmax_genes = 40\n")
    cfg = cf.load_config(p)
    assert cfg.hyperparameters.r == 0.01 and cfg.hyperparameters.s == 20.0
    assert cfg.evolution.max_genes == 40 and cfg.evolution.stage_samples == 8000


def test_type_errors():
    with pytest.raises(cf.ConfigError, match="integer"):
        cf.loads_config("[mcmc]\nsamples = 1.5\n")
    with pytest.raises(cf.ConfigError):
        cf.loads_config("[mcmc\n")


def test_thinning_saved_draws():
    assert cf.McmcControl(samples=10, thin=3).saved_draws == 3
