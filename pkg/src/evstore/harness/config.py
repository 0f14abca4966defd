"""Single JSON config file with environment overrides.

Keys are grouped by section; ``EVSTORE_<SECTION>_<KEY>`` overrides any key,
parsed with the type of its default (e.g. ``EVSTORE_HSM_PIN_WINDOW=30``).
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, fields

from ..catalog import Backend
from ..cdr import CdrConfig
from ..hsm import HsmConfig
from .generator import GeneratorProfile

DEFAULTS = {
    "generator": asdict(GeneratorProfile()),
    # 0 keeps buffer_capacity and catchup_allowance derived from max_chunk_size
    "cdr": asdict(CdrConfig()) | {"backend": "CONTAINER_A", "buffer_capacity": 0, "catchup_allowance": 0.0},
    "hsm": asdict(HsmConfig()),
    "catalog": {"lease_ttl": 10.0, "create_timeout": 30.0},
    "dataserver": {"servers": 2, "total_bandwidth": 16 * 1024 * 1024, "client_bandwidth": 2 * 1024 * 1024,
                   "max_single_read": 8 * 1024 * 1024, "processes": True},
    "migration": {"sample_fraction": 0.05, "full_runs": 2, "full_volume_fraction": 0.10, "seed": 0},
}


def _parse(text, like):
    if isinstance(like, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(float(text))
    if isinstance(like, float):
        return float(text)
    return text


def load_config(path=None, env=None):
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        with open(path) as fh:
            doc = json.load(fh)
        for section, values in doc.items():
            if section not in cfg:
                raise KeyError(f"unknown config section {section!r}")
            for key, value in values.items():
                if key not in cfg[section]:
                    raise KeyError(f"unknown config key {section}.{key}")
                cfg[section][key] = value
    env = os.environ if env is None else env
    for section, values in cfg.items():
        for key, default in values.items():
            name = f"EVSTORE_{section}_{key}".upper()
            if name in env:
                values[key] = _parse(env[name], default)
    return cfg


def _build(cls, values):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in values.items() if k in names})


def generator_profile(cfg):
    return _build(GeneratorProfile, cfg["generator"])


def hsm_config(cfg):
    return _build(HsmConfig, cfg["hsm"])


def cdr_config(cfg):
    values = dict(cfg["cdr"])
    values["backend"] = Backend[values["backend"]] if isinstance(values["backend"], str) else values["backend"]
    return _build(CdrConfig, values)
