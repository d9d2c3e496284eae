"""Sectioned key-value run configuration.

A run is described by one INI-style document::

    [run]
    seed = 0
    [dataset]
    kind = eight-gaussians
    [transport]
    kind = ot-fm
    ...

Every key has a default (``DEFAULTS``); unknown sections or keys are
rejected.  ``auto`` stands for a value derived from other keys (transport
time range, guidance warmup, ...).  All randomness derives from
``run.seed``.
"""

from __future__ import annotations

import configparser
import copy
import io

from .data import ToyDataset
from .errors import DomainError
from .network import NetworkConfig
from .sampler import ScheduleKind, build_schedule
from .trainer import TrainConfig
from .transition import WeightScheme, interval_weight
from .transport import TransportSpec

AUTO = None

DEFAULTS = {
    "run": {
        "seed": 0,
        "name": "run",
        "checkpoint_every": 0,
        "workers": 1,
    },
    "dataset": {
        "kind": "eight-gaussians",
        "n_train": 10000,
        "sigma_data": 1.0,
        "point": (0.5, -0.5),
        "mean": (0.0, 0.0),
        "cov": (1.0, 1.0),
        "radius": 2.0,
        "mode_std": 0.1,
        "moon_noise": 0.05,
        "csv_path": "",
        "normalize": AUTO,
    },
    "transport": {
        "kind": "ot-fm",
        "sigma_data": 1.0,
        "t_min": AUTO,
        "t_max": AUTO,
        "vp_beta_d": 19.9,
        "vp_beta_min": 0.1,
        "vp_T": 1000,
        "ve_sigma_min": 0.01,
        "ve_sigma_max": 50.0,
        "p_mean": -0.4,
        "p_std": 1.0,
    },
    "network": {
        "backbone": "mlp",
        "width": 128,
        "depth": 2,
        "embed_dim": 32,
        "n_heads": 1,
        "n_tokens": 1,
        "n_classes": 0,
        "fourier_bands": 2,
        "interval_input": "cnoise",
        "dtype": "float32",
    },
    "trainer": {
        "batch_size": 256,
        "iterations": 20000,
        "lr": 2e-4,
        "optimizer": "adam",
        "beta1": 0.9,
        "beta2": 0.999,
        "eps_opt": 1e-8,
        "ema_decay": 0.999,
        "dde_eps": 0.005,
        "weight_kernel": "sqrt",
        "weight_warp": "tangent",
        "frac_t_eq_r": 0.5,
        "frac_r_eq_0": 0.1,
        "loss_norm_c": 1e-3,
        "cosine_loss_scale": 0.0,
        "guidance_enabled": False,
        "guidance_omega": 1.75,
        "guidance_warmup_iters": AUTO,
        "cond_dropout": 0.1,
        "probe_every": 1000,
        "probe_size": 512,
    },
    "sampler": {
        "steps": 4,
        "n": 1000,
        "rho": 0.0,
        "omega": 1.0,
        "schedule": "uniform",
        "shift_ratio": AUTO,
        "eps_probe": "t0",
        "use_ema": True,
        "class_id": AUTO,
    },
}

# keys whose value may be left as ``auto``
_OPTIONAL = {("dataset", "normalize"), ("transport", "t_min"), ("transport", "t_max"),
             ("trainer", "guidance_warmup_iters"), ("sampler", "shift_ratio"), ("sampler", "class_id")}
_TYPES = {("dataset", "normalize"): bool, ("transport", "t_min"): float, ("transport", "t_max"): float,
          ("trainer", "guidance_warmup_iters"): int, ("sampler", "shift_ratio"): float, ("sampler", "class_id"): int}


class ConfigError(DomainError):
    """Malformed configuration; the message names the offending key."""


def _kind(section, key):
    if (section, key) in _TYPES:
        return _TYPES[(section, key)]
    return type(DEFAULTS[section][key])


def _parse_value(section, key, text):
    text = text.strip()
    if (section, key) in _OPTIONAL and text.lower() == "auto":
        return AUTO
    kind = _kind(section, key)
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(text)
            return low in ("true", "yes", "1", "on")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(float(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {text!r}: expected {kind.__name__}") from None


def _format_value(value):
    if value is AUTO:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def defaults():
    return copy.deepcopy(DEFAULTS)


def parse(text):
    """Parse a config document into a nested dict over ``DEFAULTS``."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from None
    out = defaults()
    for section in cp.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            set_value(out, f"{section}.{key}", raw)
    validate(out)
    return out


def load(path):
    try:
        with open(path) as fh:
            return parse(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def set_value(cfg, dotted, raw):
    """Apply one ``section.key=value`` override in place."""
    if "." not in dotted:
        raise ConfigError(f"override {dotted!r} must look like section.key")
    section, key = dotted.split(".", 1)
    if section not in DEFAULTS:
        raise ConfigError(f"unknown section [{section}] in {dotted!r}")
    if key not in DEFAULTS[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    cfg[section][key] = _parse_value(section, key, raw)


def dumps(cfg):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for section, keys in DEFAULTS.items():
        cp[section] = {k: _format_value(cfg[section][k]) for k in keys}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def validate(cfg):
    """Build every component once so that bad values fail before a run starts."""
    try:
        spec = build_transport(cfg)
        ds = build_dataset(cfg)
        build_network(cfg, ds)
        tc = build_train(cfg)
        # warps with a pole inside the transport's time range are rejected here
        interval_weight(spec.t_max, spec.t_min, tc.weight_scheme)
        if cfg["run"]["workers"] != 1:
            raise ConfigError("[run] workers: only single-worker execution is implemented")
        build_sample_schedule(cfg, spec)
    except ConfigError:
        raise
    except (DomainError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def build_transport(cfg):
    return TransportSpec(**cfg["transport"])


def build_dataset(cfg):
    d = dict(cfg["dataset"])
    return ToyDataset(seed=cfg["run"]["seed"], **d)


def build_network(cfg, dataset):
    return NetworkConfig(dim=dataset.dim, seed=cfg["run"]["seed"], **cfg["network"])


def build_train(cfg):
    d = dict(cfg["trainer"])
    scheme = WeightScheme(kernel=d.pop("weight_kernel"), warp=d.pop("weight_warp"),
                          sigma_data=cfg["transport"]["sigma_data"])
    betas = (d.pop("beta1"), d.pop("beta2"))
    if d["guidance_warmup_iters"] is AUTO:
        d["guidance_warmup_iters"] = d["iterations"] // 10
    return TrainConfig(weight_scheme=scheme, betas=betas, seed=cfg["run"]["seed"], **d)


def build_sample_schedule(cfg, spec, steps=None):
    s = cfg["sampler"]
    kind = ScheduleKind(s["schedule"])
    return build_schedule(spec, steps or s["steps"], kind, s["shift_ratio"], rho=s["rho"],
                          cfg_omega=s["omega"], seed=cfg["run"]["seed"], eps_probe=s["eps_probe"])
