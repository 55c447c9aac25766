"""Sectioned ``key = value`` run configuration with desk and paper profiles.

Every value has a typed default; a file only lists what it changes. The one
required key is ``[run] profile``, which selects the defaults the rest of the
file overrides.
"""

from __future__ import annotations

import configparser
import copy
import hashlib
import json
import re
from pathlib import Path

from .bounds import BoundParams, LatencyConfig
from .channel import ChannelConfig
from .errors import ConfigError
from .scenario import ScenarioConfig
from .splitnn import NetSpec
from .trainer import TrainConfig

PROFILES = ("desk", "paper")
PRESETS = ("network-i", "network-ii", "custom")
NOMINAL_SU = 4

_NONE = "none"

# Typed defaults. ``None`` entries accept the literal ``none``; their type is
# given by the matching entry in ``_OPTIONAL``.
DEFAULTS = {
    "run": {"profile": "desk"},
    "scenario": {
        "area_side": 400.0,
        "num_su": 4,
        "num_pu": 2,
        "power_levels": (1.0, 2.0, 3.0),
        "pathloss_exponent": 4.0,
        "shadowing_std_db": 3.0,
        "shadowing_mode": "static",
        "minislots_per_slot": 200,
        "num_samples": 6000,
        "train_count": 5000,
        "rss_noise_floor": 1e-12,
        "rng_seed": 0,
    },
    "network": {
        "preset": "network-ii",
        "local_hidden": 32,
        "central_hidden": 512,
        "network_i_local_hidden": 256,
        "d": 8,
        "hidden_activation": "relu",
        "central_input": "preset",
    },
    "train": {
        "eta": 1e-3,
        "rounds": 2000,
        "batch_size": None,
        "activation_ratio": 0.9,
        "seed": 0,
        "eval_every": 10,
        "target_mse": None,
        "stop_at_target": False,
        "lam": 0.0,
    },
    "channel": {"bandwidth": 1e6, "noise_power": 1e-10, "power_budget": 0.1},
    "latency": {"q": 32, "server_speed": 1e10, "su_speed": None},
    "experiment": {
        "alphas": (0.9, 0.8, 0.6, 0.4, 0.2, 0.1),
        "seeds": (0,),
        "target_mse": 100.0,
        "fig4_samples": 20,
    },
    "bounds": {
        "L": None,
        "mu": None,
        "C": None,
        "c": 0.0,
        "eps_acc": 0.1,
        "v": (1.0,),
        "rho_1": None,
        "ratios": (0.9, 0.8, 0.6, 0.4, 0.2, 0.1),
    },
}

_OPTIONAL = {
    ("train", "batch_size"): int,
    ("train", "target_mse"): float,
    ("latency", "su_speed"): float,
    ("bounds", "L"): float,
    ("bounds", "mu"): float,
    ("bounds", "C"): float,
    ("bounds", "rho_1"): float,
}

# Keys a bounds evaluation cannot default.
BOUNDS_REQUIRED = ("L", "mu", "C")

PROFILE_OVERRIDES = {
    "desk": {},
    "paper": {
        "scenario": {"num_samples": 60000, "train_count": 50000},
        "network": {"network_i_local_hidden": 2048},
        "train": {"eta": 1e-4, "rounds": 10000},
    },
}


def defaults(profile: str = "desk") -> dict:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose one of {PROFILES}")
    cfg = copy.deepcopy(DEFAULTS)
    cfg["run"]["profile"] = profile
    for section, vals in PROFILE_OVERRIDES[profile].items():
        cfg[section].update(vals)
    return cfg


def _parse_value(section: str, key: str, raw: str, default):
    raw = raw.strip()
    if raw == "":
        raise ConfigError(f"{section}.{key}: missing value")
    if default is None:
        if raw.lower() == _NONE:
            return None
        kind = _OPTIONAL[(section, key)]
        return kind(raw)
    if raw.lower() == _NONE and (section, key) in _OPTIONAL:
        return None
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(x) for x in re.split(r"[,\s]+", raw) if x)
    return type(default)(raw)


def _line_of(text: str, section: str, key: str) -> int | None:
    current = None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", s, re.IGNORECASE):
            return n
    return None


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse config text into a fully resolved nested dict."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from exc

    if not parser.has_option("run", "profile"):
        raise ConfigError(f"{source}: missing required key 'run.profile'")
    cfg = defaults(parser.get("run", "profile").strip())

    for section in parser.sections():
        if section not in cfg:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            line = _line_of(text, section, key)
            where = f"{source}:{line}" if line else source
            if key not in cfg[section]:
                raise ConfigError(f"{where}: unknown key '{section}.{key}'")
            try:
                cfg[section][key] = _parse_value(section, key, raw, DEFAULTS[section][key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{where}: bad value for '{section}.{key}': {exc}") from exc

    validate(cfg)
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def _fmt(value) -> str:
    if value is None:
        return _NONE
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def render_config(cfg: dict) -> str:
    """Inverse of :func:`parse_config`; the output parses back to ``cfg``."""
    lines = []
    for section, vals in cfg.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_fmt(v)}" for k, v in vals.items())
        lines.append("")
    return "\n".join(lines)


def digest(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()


def validate(cfg: dict) -> None:
    """Build every derived object once so bad values fail early."""
    scenario_config(cfg).validate()
    train_config(cfg)
    channel_config(cfg)
    if cfg["network"]["preset"] not in PRESETS:
        raise ConfigError(f"network.preset must be one of {PRESETS}")
    ci = cfg["network"]["central_input"]
    if ci not in ("auto", "preset") and not ci.isdigit():
        raise ConfigError("network.central_input must be 'preset', 'auto' or an integer")


def scenario_config(cfg: dict, **overrides) -> ScenarioConfig:
    s = dict(cfg["scenario"], **overrides)
    return ScenarioConfig(**s)


def train_config(cfg: dict, **overrides) -> TrainConfig:
    return TrainConfig(**dict(cfg["train"], **overrides))


def channel_config(cfg: dict) -> ChannelConfig:
    c = cfg["channel"]
    return ChannelConfig(c["bandwidth"], c["noise_power"], c["power_budget"], cfg["scenario"]["pathloss_exponent"])


def net_spec(cfg: dict, num_su: int, input_dim: int, label_dim: int = 8, preset: str | None = None) -> NetSpec:
    """Resolve the network preset for a dataset with ``num_su`` SUs.

    ``central_input = preset`` keeps the presets' four-SU width ``4 d``;
    ``auto`` widens it to ``num_su * d``; an integer is taken as given. A width
    that differs from ``num_su * d`` raises :class:`DimensionMismatchError`.
    """
    n = cfg["network"]
    preset = preset or n["preset"]
    d = n["d"]
    if preset == "network-i":
        local_hidden, central_hidden, nominal = n["network_i_local_hidden"], 24, NOMINAL_SU * d
    elif preset == "network-ii":
        local_hidden, central_hidden, nominal = 32, 512, NOMINAL_SU * d
    elif preset == "custom":
        local_hidden, central_hidden, nominal = n["local_hidden"], n["central_hidden"], num_su * d
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    ci = n["central_input"]
    width = nominal if ci == "preset" else num_su * d if ci == "auto" else int(ci)
    return NetSpec((input_dim, local_hidden, d), (width, central_hidden, label_dim), num_su, n["hidden_activation"])


def latency_config(cfg: dict, spec: NetSpec, samples: int) -> LatencyConfig:
    lat = cfg["latency"]
    return LatencyConfig.from_spec(spec, samples, q=lat["q"], bandwidth=cfg["channel"]["bandwidth"],
                                   server_speed=lat["server_speed"], su_speed=lat["su_speed"])


def bound_params(cfg: dict, v: float) -> BoundParams:
    b = cfg["bounds"]
    missing = [k for k in BOUNDS_REQUIRED if b[k] is None]
    if missing:
        raise ConfigError(f"missing required key 'bounds.{missing[0]}'")
    return BoundParams(L=b["L"], mu=b["mu"], C=b["C"], c=b["c"], eps_acc=b["eps_acc"], v=v)
