"""JSON configuration: nested or dotted keys, overridden by command-line flags."""
from __future__ import annotations

import json
import logging
from dataclasses import replace

log = logging.getLogger(__name__)

# config key -> SelectionOptions attribute
_OPTION_KEYS = {
    "seed": "seed",
    "variance_retained": "variance_retained",
    "include_name_order": "include_name_order",
    "workers": "workers",
    "ap.damping": "ap_damping",
    "ap.max_iter": "ap_max_iter",
    "ap.convergence_iter": "ap_convergence_iter",
    "ap.preference": "ap_preference",
    "gmm.criterion": "gmm_criterion",
    "gmm.k_max": "gmm_k_max",
    "gmm.restarts": "gmm_restarts",
    "gmm.reg_floor": "gmm_reg_floor",
    "ms.quantile": "ms_quantile",
    "optics.minpts_candidates": "optics_minpts_candidates",
    "optics.threshold_quantile": "optics_threshold_quantile",
}
_TOP_KEYS = {"roots", "exclusions", "method", "suffix", "min_files"}
_PROFILE_FIELDS = {"order", "threads", "pre_encryption_delay", "extension", "min_size_filter", "throughput"}


class ConfigError(ValueError):
    pass


def flatten(data: dict, prefix: str = "") -> dict:
    """``{"ap": {"damping": 0.5}}`` -> ``{"ap.damping": 0.5}``. Profile
    override tables under ``emulator.profiles`` are kept whole."""
    out = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key != "emulator.profiles":
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    flat = flatten(data)
    unknown = sorted(k for k in flat if k not in _OPTION_KEYS and k not in _TOP_KEYS and k != "emulator.profiles")
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    return flat


def selection_options(cfg: dict, **overrides):
    from .selection import SelectionOptions

    opts = SelectionOptions()
    values = {attr: cfg[key] for key, attr in _OPTION_KEYS.items() if key in cfg}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return replace(opts, **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def apply_profile_overrides(profile, cfg: dict, **flags):
    """Config ``emulator.profiles.<name>`` table first, then explicit flags."""
    table = {k.lower(): v for k, v in (cfg.get("emulator.profiles") or {}).items()}
    changes = dict(table.get(profile.name.lower(), {}))
    bad = set(changes) - _PROFILE_FIELDS
    if bad:
        raise ConfigError(f"unknown profile fields for {profile.name}: {sorted(bad)}")
    changes.update({k: v for k, v in flags.items() if v is not None})
    return replace(profile, **changes) if changes else profile
