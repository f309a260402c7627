"""Experiment configuration, derived scales and the Condition-1 report."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

DELTA = 0.05
EPSILON = 0.01

FLIP_MODES = ("bernoulli", "exact")


class ConfigError(ValueError):
    """Raised for invalid or unparseable configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    d: int = 2000
    n: int = 100
    m: int = 20
    mu_mag: float = 20.0
    sigma_xi: float = 1.0
    sigma_0: float = 0.01
    tau_plus: float = 0.1
    tau_minus: float = 0.1
    eta: float = 0.1
    T: int = 200
    seed_data: int = 0
    seed_init: int = 0
    seed_test: int = 0
    n_test: int = 10000
    flip_mode: str = "bernoulli"
    snapshot_stride: int = 10

    def __post_init__(self):
        for name in ("d", "n", "m", "n_test", "snapshot_stride"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.T, int) or self.T < 0:
            raise ConfigError(f"T must be a nonnegative integer, got {self.T!r}")
        if self.n % 2:
            raise ConfigError(f"n must be even for a balanced training set, got {self.n}")
        for name in ("mu_mag", "sigma_xi", "eta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive real, got {v!r}")
        # sigma_0 = 0 is admitted: the all-zero initialization is a useful degenerate case
        if not (math.isfinite(self.sigma_0) and self.sigma_0 >= 0):
            raise ConfigError(f"sigma_0 must be nonnegative, got {self.sigma_0!r}")
        check_flip_probability(self.tau_plus, "tau_plus")
        check_flip_probability(self.tau_minus, "tau_minus")
        for name in ("seed_data", "seed_init", "seed_test"):
            v = getattr(self, name)
            if not isinstance(v, int) or not 0 <= v < 2**64:
                raise ConfigError(f"{name} must be a 64-bit unsigned integer, got {v!r}")
        if self.flip_mode not in FLIP_MODES:
            raise ConfigError(f"flip_mode must be one of {FLIP_MODES}, got {self.flip_mode!r}")

    @property
    def noiseless(self) -> bool:
        return self.tau_plus == 0 and self.tau_minus == 0

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Use one seed for data, init and test streams (streams are tagged separately)."""
        return self.replace(seed_data=seed, seed_init=seed, seed_test=seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self, include_seeds: bool = False) -> str:
        payload = self.to_dict()
        if not include_seeds:
            for k in ("seed_data", "seed_init", "seed_test"):
                payload.pop(k)
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def check_flip_probability(tau: float, name: str = "tau") -> None:
    if not (isinstance(tau, (int, float)) and 0 <= tau < 0.5):
        raise ConfigError(f"{name} must lie in [0, 0.5), got {tau!r}")


# --------------------------------------------------------------------------
# key = value files

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw, 0)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_kv_text(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def config_from_mapping(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from flat string (or typed) values layered over ``base``."""
    unknown = sorted(set(values) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    typed = {k: _coerce(k, v) if isinstance(v, str) else v for k, v in values.items()}
    base = base or ExperimentConfig()
    return base.replace(**typed)


def load_config_file(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_mapping(parse_kv_text(text, str(path)))


PRESETS = ("fig1-noisy", "fig1-clean", "fig3-grid")


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("noisy_feature_lab.presets").joinpath(f"{name}.cfg").read_text()


# --------------------------------------------------------------------------
# scales and Condition 1


@dataclass(frozen=True)
class ConditionItem:
    name: str
    lhs: tuple
    rhs: tuple
    passed: bool


@dataclass(frozen=True)
class ConditionReport:
    snr: float
    n_snr2: float
    t1_estimate: float
    # two variants of the maximum-iteration scale differ only in the sigma_xi power
    t_star_sigma2: float
    t_star_sigma1: float
    C: float | None = None
    delta: float = DELTA
    epsilon: float = EPSILON
    items: list[ConditionItem] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.items) and all(it.passed for it in self.items)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["passed"] = self.passed
        return out


def _t_star(cfg: ExperimentConfig, epsilon: float, sigma_power: int) -> float:
    return cfg.n * cfg.m / (cfg.eta * epsilon * cfg.sigma_xi**sigma_power * cfg.d)


def derive_scales(cfg: ExperimentConfig, epsilon: float = EPSILON) -> ConditionReport:
    snr = cfg.mu_mag / (cfg.sigma_xi * math.sqrt(cfg.d))
    return ConditionReport(
        snr=snr,
        n_snr2=cfg.n * snr * snr,
        t1_estimate=cfg.n * cfg.m / (cfg.eta * cfg.sigma_xi**2 * cfg.d),
        t_star_sigma2=_t_star(cfg, epsilon, 2),
        t_star_sigma1=_t_star(cfg, epsilon, 1),
        epsilon=epsilon,
    )


def validate_condition(cfg: ExperimentConfig, C: float = 1.0, epsilon: float = EPSILON,
                       delta: float = DELTA) -> ConditionReport:
    """Evaluate the six clauses literally at constant ``C``.

    Clause 1 holds asymptotic orders; it passes whenever both flip
    probabilities lie in [0, 1/2) and otherwise only reports values.
    """
    if C < 1:
        raise ConfigError(f"C must be >= 1, got {C}")
    base = derive_scales(cfg, epsilon)
    d, n, m = cfg.d, cfg.n, cfg.m
    mu, sx = cfg.mu_mag, cfg.sigma_xi
    log = math.log
    t_star = base.t_star_sigma2
    log_t = log(max(t_star, math.e))

    items = []
    items.append(ConditionItem(
        "snr_and_flip_order",
        (base.n_snr2, cfg.tau_plus, cfg.tau_minus),
        (math.nan, 0.5, 0.5),
        0 <= cfg.tau_plus < 0.5 and 0 <= cfg.tau_minus < 0.5,
    ))
    d_rhs = C * max(n**2 * log(n * m / delta) * log_t**2,
                    n * mu / sx * math.sqrt(log(n / delta)))
    items.append(ConditionItem("dimension", (d,), (d_rhs,), d >= d_rhs))
    m_rhs, n_rhs = C * log(n / delta), C * log(m / delta)
    items.append(ConditionItem("width_and_samples", (m, n), (m_rhs, n_rhs),
                               m >= m_rhs and n >= n_rhs))
    mu_rhs = C * sx**2 * log(n / delta)
    items.append(ConditionItem("signal_strength", (mu**2,), (mu_rhs,), mu**2 >= mu_rhs))
    s0_rhs = min(math.sqrt(n) / (sx * d), 1 / (mu * math.sqrt(log(m / delta)))) / C
    items.append(ConditionItem("init_scale", (cfg.sigma_0,), (s0_rhs,), cfg.sigma_0 <= s0_rhs))
    eta_rhs = min(d**-1.5 * n**2 * m * math.sqrt(log(n / delta)), n / d) / (C * sx**2)
    items.append(ConditionItem("learning_rate", (cfg.eta,), (eta_rhs,), cfg.eta <= eta_rhs))

    return dataclasses.replace(base, C=C, delta=delta, items=items)
