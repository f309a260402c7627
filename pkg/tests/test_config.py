import math

import pytest
from hypothesis import given, settings, strategies as st

from noisy_feature_lab.config import (PRESETS, ConfigError, ExperimentConfig, config_from_mapping,
                                      derive_scales, load_config_file, parse_kv_text, preset_text,
                                      validate_condition)


def test_default_scale_parameter():
    assert derive_scales(ExperimentConfig()).n_snr2 == pytest.approx(20.0, rel=1e-12)


def test_unit_case_scales():
    r = derive_scales(ExperimentConfig(d=1, n=2, mu_mag=1.0, sigma_xi=1.0))
    assert r.snr == 1.0
    assert r.n_snr2 == 2.0


def test_scales_by_hand():
    cfg = ExperimentConfig(d=2500, n=50, m=10, mu_mag=20.0, sigma_xi=1.0, eta=0.2)
    r = derive_scales(cfg, epsilon=0.01)
    assert r.snr == pytest.approx(0.4)
    assert r.n_snr2 == pytest.approx(8.0)
    assert r.t1_estimate == pytest.approx(50 * 10 / (0.2 * 2500))
    assert r.t_star_sigma2 == pytest.approx(50 * 10 / (0.2 * 0.01 * 2500))


def test_flip_probability_out_of_range():
    with pytest.raises(ConfigError):
        ExperimentConfig(tau_plus=0.6)
    with pytest.raises(ConfigError):
        ExperimentConfig(tau_minus=0.5)


def test_dimension_clause_fails_for_tiny_d():
    rep = validate_condition(ExperimentConfig(d=10, n=100), C=1)
    items = {it.name: it for it in rep.items}
    assert not items["dimension"].passed
    assert not rep.passed


def test_default_report_shape():
    rep = validate_condition(ExperimentConfig())
    names = [it.name for it in rep.items]
    assert names == ["snr_and_flip_order", "dimension", "width_and_samples",
                     "signal_strength", "init_scale", "learning_rate"]
    assert rep.items[0].passed
    # the desk-scale default is far below the literal dimension requirement
    assert not rep.items[1].passed
    d = rep.to_dict()
    assert d["passed"] is False and len(d["items"]) == 6


def test_constant_below_one_rejected():
    with pytest.raises(ConfigError):
        validate_condition(ExperimentConfig(), C=0.5)


def test_report_is_deterministic():
    cfg = ExperimentConfig()
    assert validate_condition(cfg).to_dict() == validate_condition(cfg).to_dict()


@settings(max_examples=50, deadline=None)
@given(d=st.integers(1, 10**6), mu=st.floats(0.01, 100), sx=st.floats(0.01, 10))
def test_doubling_dimension_halves_snr2(d, mu, sx):
    a = derive_scales(ExperimentConfig(d=d, mu_mag=mu, sigma_xi=sx)).snr ** 2
    b = derive_scales(ExperimentConfig(d=2 * d, mu_mag=mu, sigma_xi=sx)).snr ** 2
    assert b == pytest.approx(a / 2, rel=1e-12)


@pytest.mark.parametrize("kwargs", [
    {"n": 3}, {"d": 0}, {"m": -1}, {"eta": 0.0}, {"sigma_xi": -1.0}, {"sigma_0": -0.1},
    {"T": -1}, {"flip_mode": "sometimes"}, {"mu_mag": math.nan},
])
def test_invalid_fields(kwargs):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kwargs)


def test_zero_init_scale_admitted():
    assert ExperimentConfig(sigma_0=0.0).sigma_0 == 0.0


def test_hash_ignores_seeds():
    cfg = ExperimentConfig()
    assert cfg.config_hash() == cfg.with_seed(5).config_hash()
    assert cfg.config_hash(include_seeds=True) != cfg.with_seed(5).config_hash(include_seeds=True)
    assert cfg.config_hash() != cfg.replace(eta=0.2).config_hash()


def test_kv_parsing_and_layering(tmp_path):
    text = "# comment\nd = 64\nmu_mag=3.5  # trailing\n\nflip_mode = exact\n"
    vals = parse_kv_text(text)
    assert vals == {"d": "64", "mu_mag": "3.5", "flip_mode": "exact"}
    cfg = config_from_mapping(vals, ExperimentConfig(n=10))
    assert (cfg.d, cfg.n, cfg.mu_mag, cfg.flip_mode) == (64, 10, 3.5, "exact")
    p = tmp_path / "c.cfg"
    p.write_text(text)
    assert load_config_file(p) == config_from_mapping(vals)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        config_from_mapping({"learning_rate": "0.1"})


def test_bad_value_rejected():
    with pytest.raises(ConfigError):
        config_from_mapping({"d": "lots"})


@pytest.mark.parametrize("name", PRESETS)
def test_presets_parse(name):
    vals = {k: v for k, v in parse_kv_text(preset_text(name)).items() if not k.startswith("grid.")}
    cfg = config_from_mapping(vals)
    assert (cfg.d, cfg.n, cfg.eta, cfg.T) == (2000, 100, 0.1, 200)


def test_fig1_presets_differ_only_in_noise():
    noisy = config_from_mapping(parse_kv_text(preset_text("fig1-noisy")))
    clean = config_from_mapping(parse_kv_text(preset_text("fig1-clean")))
    assert noisy.replace(tau_plus=0.0, tau_minus=0.0) == clean
    assert noisy == ExperimentConfig()
