"""Loading and hashing of the shared JSON configuration."""

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def default_config():
    text = resources.files("mbloco").joinpath("data/default_config.json").read_text()
    return json.loads(text)


def load_config(path=None, overrides=None):
    """Read a config file layered over the packaged defaults.

    Keys missing from ``path`` fall back to the defaults, so a user file only
    needs to carry what it changes. ``terrains`` is replaced wholesale.
    """
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        if user.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {user.get('version')}")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


WORLD_SECTIONS = ("sim", "terrains", "texture", "features")


def world_hash(cfg):
    """Hash of the sections that shape collected data (simulator, terrains, camera)."""
    return config_hash({k: cfg[k] for k in WORLD_SECTIONS if k in cfg})
