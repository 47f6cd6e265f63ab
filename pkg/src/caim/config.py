"""Run configuration: a flat key = value format with [sections].

The format is a small TOML subset: comments start with '#', values are
integers, floats, booleans, quoted strings or flat [..] lists of numbers.
Every tunable has a default here, so commands run with a partial or absent
file; the effective configuration is echoed into reports for provenance.
The CAIM_SEED environment variable overrides every configured seed.
"""

from __future__ import annotations

import os
from pathlib import Path

from .data import SceneConfig
from .errors import ConfigError
from .losses import LossConfig
from .refine import ModelConfig
from .training import TrainConfig

DEFAULTS = {
    "scene": {
        "t_len": 6, "bands": 4, "height": 192, "width": 192,
        "n_objects": 24, "noise_std": 0.05, "seed": 0,
        "n_scenes": 30, "patch": 64, "stride": 64,
        "split_train": 8, "split_val": 1, "split_test": 1,
    },
    "model": {
        "channels": 64, "hidden": 32, "n_heads": 4, "ffn_mult": 2,
        "extractor2_mid": 64, "cam_scales": [2, 4], "signed_diff": False,
    },
    "train": {
        "learning_rate": 1e-4, "epochs": 10, "batch_size": 2, "seed": 0,
    },
    "loss": {
        "gamma": 2.0, "class_weight_mode": "inverse_frequency", "eps": 1e-12,
    },
    "bench": {
        "repeats": 5,
    },
}


def _parse_value(text, path, lineno):
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        if not inner:
            return []
        return [_parse_value(part, path, lineno) for part in inner.split(",")]
    if text.startswith('"') and text.endswith('"') and len(text) >= 2:
        return text[1:-1]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{path}:{lineno}: cannot parse value {text!r}") from None


def parse_config_text(text, path="<config>"):
    out = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        if section is None:
            raise ConfigError(f"{path}:{lineno}: key outside any [section]")
        key, value = line.split("=", 1)
        out[section][key.strip()] = _parse_value(value, path, lineno)
    return out


def load_config(path=None):
    """Defaults merged with the file at ``path`` (if given) and CAIM_SEED."""
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    if path is not None:
        parsed = parse_config_text(Path(path).read_text(), str(path))
        for sec, vals in parsed.items():
            if sec not in cfg:
                raise ConfigError(f"unknown config section [{sec}]")
            for key, v in vals.items():
                if key not in cfg[sec]:
                    raise ConfigError(f"unknown key {key!r} in section [{sec}]")
                cfg[sec][key] = v
    seed_override = os.environ.get("CAIM_SEED")
    if seed_override is not None:
        try:
            seed = int(seed_override)
        except ValueError:
            raise ConfigError(f"CAIM_SEED must be an integer, got {seed_override!r}") from None
        cfg["scene"]["seed"] = seed
        cfg["train"]["seed"] = seed
    return cfg


def config_lines(cfg):
    """Flat provenance lines echoed into every report."""
    out = []
    for sec in sorted(cfg):
        for key in sorted(cfg[sec]):
            out.append(f"config.{sec}.{key}={cfg[sec][key]}")
    return out


def scene_config(cfg, seed=None):
    s = cfg["scene"]
    return SceneConfig(t_len=s["t_len"], bands=s["bands"], height=s["height"],
                       width=s["width"], n_objects=s["n_objects"],
                       noise_std=s["noise_std"],
                       seed=s["seed"] if seed is None else seed)


def model_config(cfg):
    s, m = cfg["scene"], cfg["model"]
    return ModelConfig(t_len=s["t_len"], bands=s["bands"], channels=m["channels"],
                       hidden=m["hidden"], n_heads=m["n_heads"],
                       ffn_mult=m["ffn_mult"], extractor2_mid=m["extractor2_mid"],
                       cam_scales=tuple(m["cam_scales"]),
                       signed_diff=m["signed_diff"])


def train_config(cfg):
    t = cfg["train"]
    return TrainConfig(learning_rate=t["learning_rate"], epochs=t["epochs"],
                       batch_size=t["batch_size"], seed=t["seed"],
                       patch=cfg["scene"]["patch"])


def loss_config(cfg):
    l = cfg["loss"]
    return LossConfig(gamma=l["gamma"], class_weight_mode=l["class_weight_mode"],
                      eps=l["eps"])
