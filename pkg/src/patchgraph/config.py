"""Run configuration: presets, JSON loading, dotted overrides, hashing.

The configuration is a single nested mapping validated against the preset
schema (unknown keys are rejected). Stage hashes cover only the keys a
pipeline stage depends on, so downstream config edits don't invalidate
upstream artifacts.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

__all__ = [
    "ConfigError",
    "default_config",
    "load_config",
    "apply_overrides",
    "config_hash",
    "stage_hash",
    "STAGE_KEYS",
    "PRESETS",
]


class ConfigError(ValueError):
    pass


_DESK = {
    "preset": "desk",
    "seed": 0,
    "io": {"normalize": "zscore"},
    "phantom": {
        "count": 20,
        "shape": [40, 40, 40],
        "lattice_shape": [3, 3, 3],
        "lattice_margin_frac": 0.2,
        "lesion_intensity_delta": 0.6,
        "lesion_radius": 4.2,
        "severity_rule": "presence",
        "affected_cells_choices": [2, 3, 4],
        "diseased_fraction": 0.5,
        "warp_max_disp": 2.0,
        "rot_max_deg": 5.0,
        "scale_range": [0.92, 1.08],
        "shift_max": 3.0,
        "gain_jitter": 0.15,
        "offset_jitter": 0.1,
        "noise_sigma": 0.05,
        "texture_amp": 0.6,
        "template_seed": 0,
    },
    "grid": {
        "patch_size": [16, 16, 16],
        "stride": [12, 12, 12],
        "min_mask_overlap": 0.02,
    },
    "registration": {
        "kind": "affine",
        "pyramid": [4, 2, 1],
        "iters": [120, 60, 20],
        "lr": 0.05,
        "lambda_reg": 0.0001,
        "disp_control_pts": 5,
        "disp_iters": 80,
        "disp_lr": 0.01,
        "lambda_smooth": 0.1,
    },
    "graph": {"threshold_mm": None, "adjacency_space": "subject"},
    "encoder": {
        "patch_size": [16, 16, 16],
        "block_channels": [4, 8, 16, 32],
        "convs_per_block": [2, 2, 2, 2],
    },
    "augment": {
        "elastic_grid_spacing": 8,
        "elastic_max_disp": 1.5,
        "noise_sigma": 0.05,
        "gamma_range": [0.7, 1.4],
    },
    "contrastive": {
        "temperature": 0.2,
        "queue_capacity": 512,
        "graph_queue_capacity": 256,
        "use_graph_queue": True,
        "momentum": 0.999,
        "patch_loss_weight": 1.0,
        "graph_loss_weight": 1.0,
    },
    "trainer": {
        "epochs": 5,
        "lr": 0.001,
        "beta1": 0.9,
        "beta2": 0.999,
        "weight_decay": 0.0001,
        "schedule": "cosine",
        "patch_batch": 32,
        "graph_batch": 8,
    },
    "probe": {
        "folds": 5,
        "seed": 0,
        "ridge_lambda": 0.001,
        "l2_strength": 1.0,
        "tasks": ["severity", "burden"],
    },
    "explain": {"task": "severity", "prenormalize": False, "axial_index": None},
}

# Published full-scale values; not runnable at desk scale.
_PAPER_OVERRIDES = {
    "preset": "paper",
    "grid": {"patch_size": [32, 32, 32], "stride": [16, 16, 16], "min_mask_overlap": 0.5},
    "encoder": {
        "patch_size": [32, 32, 32],
        "block_channels": [8, 16, 32, 64, 128],
        "convs_per_block": [2, 3, 3, 3, 2],
    },
    "contrastive": {
        "temperature": 0.2,
        "queue_capacity": 4096,
        "graph_queue_capacity": 4096,
        "use_graph_queue": True,
        "momentum": 0.999,
        "patch_loss_weight": 1.0,
        "graph_loss_weight": 1.0,
    },
    "trainer": {
        "epochs": 30,
        "lr": 0.03,
        "beta1": 0.9,
        "beta2": 0.999,
        "weight_decay": 0.0001,
        "schedule": "cosine",
        "patch_batch": 128,
        "graph_batch": 16,
    },
}


def _deep_merge(base, overrides, path=""):
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be a mapping")
            out[key] = _deep_merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


PRESETS = {
    "desk": _DESK,
    "paper": _deep_merge(_DESK, _PAPER_OVERRIDES),
}


def default_config(preset: str = "desk") -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (choose from {sorted(PRESETS)})")
    return copy.deepcopy(PRESETS[preset])


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply --set key.path=value pairs; keys must exist in the schema."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, _, raw = item.partition("=")
        node = cfg
        parts = dotted.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key: {dotted.strip()}")
            node = node[part]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"unknown config key: {dotted.strip()}")
        if isinstance(node[leaf], dict):
            raise ConfigError(f"config key {dotted.strip()} is a section, not a value")
        node[leaf] = _parse_value(raw)
    return cfg


def load_config(path=None, preset: str = "desk", overrides=None) -> dict:
    """Preset defaults, optionally merged with a JSON file, then --set pairs."""
    cfg = default_config(preset)
    if path is not None:
        file_path = Path(path)
        if not file_path.exists():
            raise ConfigError(f"config file not found: {file_path}")
        try:
            with open(file_path, encoding="utf-8") as f:
                user = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {file_path} is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError(f"config file {file_path} must hold a JSON object")
        cfg = _deep_merge(cfg, user)
    return apply_overrides(cfg, overrides)


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()[:16]


STAGE_KEYS = {
    "phantom": ["seed", "phantom"],
    "graphs": ["seed", "phantom", "io", "grid", "registration", "graph"],
    "pretrain": [
        "seed", "phantom", "io", "grid", "registration", "graph",
        "encoder", "augment", "contrastive", "trainer",
    ],
    "probe": [
        "seed", "phantom", "io", "grid", "registration", "graph",
        "encoder", "augment", "contrastive", "trainer", "probe",
    ],
}


def stage_hash(cfg: dict, stage: str) -> str:
    subset = {k: cfg[k] for k in STAGE_KEYS[stage]}
    return config_hash(subset)
