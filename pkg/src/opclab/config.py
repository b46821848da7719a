"""INI-style experiment configs with per-subcommand schemas.

A config looks like::

    [study]
    subcommand = gradient
    seed = 7

    [policy]
    theta = linspace(-2, 0, 101)
    theta_ref = -1.0

Lists are comma-separated; ``linspace(a, b, n)`` expands to ``n`` evenly
spaced values. Every key is validated against the subcommand's schema
before anything runs.
"""

import configparser
import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np

from opclab.errors import ConfigError

_LINSPACE = re.compile(r"^linspace\(\s*([^,]+),\s*([^,]+),\s*([^,)]+)\)$")


def _float(text, key):
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {text!r}", key) from None
    if not np.isfinite(v):
        raise ConfigError(f"{key}: value must be finite", key)
    return v


def _int(text, key):
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {text!r}", key) from None


def _floats(text, key):
    text = text.strip()
    m = _LINSPACE.match(text)
    if m:
        a, b = _float(m.group(1), key), _float(m.group(2), key)
        n = _int(m.group(3).strip(), key)
        if n < 1:
            raise ConfigError(f"{key}: linspace needs n >= 1", key)
        return [float(x) for x in np.linspace(a, b, n)]
    items = [x.strip() for x in text.split(",") if x.strip()]
    if not items:
        raise ConfigError(f"{key}: grid must not be empty", key)
    return [_float(x, key) for x in items]


def _ints(text, key):
    items = [x.strip() for x in text.split(",") if x.strip()]
    if not items:
        raise ConfigError(f"{key}: list must not be empty", key)
    return [_int(x, key) for x in items]


def _ref(text, key):
    text = text.strip()
    if text == "on-policy":
        return text
    return _float(text, key)


PARSERS = {"float": _float, "int": _int, "floats": _floats, "ints": _ints, "ref": _ref, "str": lambda t, k: t.strip()}

_SCALAR_ENV = {
    "env.A": ("float", 1.0),
    "env.B": ("float", 1.0),
    "env.s0": ("float", 1.0),
    "env.T": ("int", 60),
    "env.sigma_r": ("float", 0.05),
}
_DI_ENV = {
    "env.dt": ("float", 0.1),
    "env.noise_var": ("float", 0.01),
    "env.T": ("int", 30),
    "env.sigma_r": ("float", 0.5),
}

SCHEMAS = {
    "gradient": {
        **_SCALAR_ENV,
        "policy.theta": ("floats", "linspace(-2, 0, 101)"),
        "policy.theta_ref": ("ref", -1.0),
        "model.dA": ("floats", "linspace(-1, 1, 81)"),
        "model.dB": ("floats", "linspace(-1, 1, 81)"),
    },
    "landscape": {
        **_SCALAR_ENV,
        "policy.theta": ("floats", "linspace(-2, 0, 201)"),
        "policy.theta_ref": ("float", -1.0),
        "model.dA": ("float", 0.5),
        "model.dB": ("float", 0.0),
    },
    "state-dist": {
        **_DI_ENV,
        "model.dA": ("float", 0.05),
        "policy.theta": ("floats", "-1.0, -1.5"),
        "policy.sigma": ("float", 0.25),
        "policy.beta_ref": ("float", 1.0),
        "policy.beta": ("floats", "1.0, 1.5"),
        "study.samples": ("int", 2000),
    },
    "off-policy": {
        **_DI_ENV,
        "model.dA": ("float", 0.05),
        "policy.theta": ("floats", "-1.0, -1.5"),
        "policy.sigma": ("float", 0.25),
        "policy.beta_ref": ("float", 1.0),
        "policy.beta": ("floats", "1.0, 1.5, 2.0, 2.5"),
        "study.samples": ("int", 4000),
    },
    "lemma1": {
        **_DI_ENV,
        "model.dA": ("float", 0.05),
        "policy.theta": ("floats", "-1.0, -1.5"),
        "study.B_grid": ("ints", "4, 16, 64, 256"),
        "study.trials": ("int", 200),
    },
    "bound-check": {
        "study.configs": ("int", 20),
        "study.rollouts": ("int", 10000),
        "study.T_max": ("int", 6),
        "study.gamma": ("float", 0.9),
        "study.sigma_r": ("float", 0.5),
        "study.model_error": ("float", 0.1),
        "policy.beta": ("floats", "0.0, 0.5, 1.0"),
    },
    "ilc-equiv": {
        "study.instances": ("int", 50),
        "study.perturbations": ("int", 100),
        "study.max_ns": ("int", 3),
        "study.max_na": ("int", 3),
        "study.max_T": ("int", 8),
    },
    "mbrl-loop": {
        **_SCALAR_ENV,
        "model.dA": ("float", 0.5),
        "model.dB": ("float", 0.0),
        "policy.theta0": ("float", -0.2),
        "study.iterations": ("int", 30),
        "study.H": ("int", 20),
        "study.N": ("int", 400),
        "study.K": ("int", 1),
        "study.alpha": ("float", 0.5),
        "study.steps": ("int", 5),
        "study.eps_pi": ("float", 0.04),
    },
}

POSITIVE = {
    "env.T", "env.sigma_r", "env.dt", "study.samples", "study.trials", "study.configs", "study.rollouts",
    "study.T_max", "study.instances", "study.iterations", "study.H", "study.N", "study.K", "study.alpha",
    "study.steps", "study.eps_pi", "study.max_ns", "study.max_na", "study.max_T", "study.sigma_r",
}
NONNEGATIVE = {"env.noise_var", "policy.sigma", "policy.beta_ref", "policy.beta", "study.perturbations", "study.model_error"}


@dataclass
class ExperimentConfig:
    subcommand: str
    seed: int
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def canonical(self):
        """Canonical text form: sorted keys, repr-exact floats."""
        payload = {"subcommand": self.subcommand, "seed": self.seed, "values": self.values}
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def with_seed(self, seed):
        return ExperimentConfig(self.subcommand, int(seed), dict(self.values))


def _check_range(key, value):
    vals = value if isinstance(value, list) else [value]
    for v in vals:
        if isinstance(v, str):
            continue
        if key in POSITIVE and not v > 0:
            raise ConfigError(f"{key}: must be positive", key)
        if key in NONNEGATIVE and not v >= 0:
            raise ConfigError(f"{key}: must be nonnegative", key)
    if key == "study.gamma" and not 0 <= value < 1:
        raise ConfigError("study.gamma: must lie in [0, 1)", key)
    if key == "study.B_grid" and min(value) < 1:
        raise ConfigError("study.B_grid: entries must be >= 1", key)


def parse_config(text, subcommand=None, seed=None):
    """Parse and validate config text; ``seed`` overrides the file's seed."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}", "config") from None
    file_sub = cp.get("study", "subcommand", fallback=None)
    if subcommand is None:
        subcommand = file_sub
    elif file_sub is not None and file_sub.strip() != subcommand:
        raise ConfigError(f"config is for {file_sub.strip()!r}, not {subcommand!r}", "study.subcommand")
    if subcommand not in SCHEMAS:
        raise ConfigError(f"unknown subcommand {subcommand!r}", "study.subcommand")
    schema = SCHEMAS[subcommand]
    raw = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            name = f"{section}.{key}"
            if name in ("study.subcommand", "study.seed"):
                continue
            if name not in schema:
                raise ConfigError(f"unknown key {name!r} for {subcommand}", name)
            raw[name] = value
    if seed is None:
        if not cp.has_option("study", "seed"):
            raise ConfigError("study.seed is required", "study.seed")
        seed = _int(cp.get("study", "seed"), "study.seed")
    if seed < 0:
        raise ConfigError("study.seed must be nonnegative", "study.seed")
    values = {}
    for name, (kind, default) in schema.items():
        text = raw.get(name, str(default))
        values[name] = PARSERS[kind](text, name)
        _check_range(name, values[name])
    return ExperimentConfig(subcommand, int(seed), values)


def load_config(path, subcommand=None, seed=None):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", "config") from None
    return parse_config(text, subcommand, seed)


def default_config(subcommand, seed=0):
    return parse_config(f"[study]\nsubcommand = {subcommand}\nseed = {seed}\n")
