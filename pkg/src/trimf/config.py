"""Run configuration: strict schema validation with explicit field paths.

One JSON config drives a training run. Every hyperparameter has a default;
unknown keys are hard errors so silently misspelled settings cannot fall
back to defaults.
"""

from __future__ import annotations

import copy
import hashlib
import json


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of range."""


MODALITIES = ("image", "text", "tabular")
VARIANTS = ("full", "no_sa", "no_lmf", "no_frcl")
LABEL_COUNT = 14


def _positive_int(v):
    return isinstance(v, int) and not isinstance(v, bool) and v > 0


def _number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


# field -> (default, predicate, description of the accepted values)
_MODEL_SCHEMA = {
    "d_model": (256, _positive_int, "positive int"),
    "head_count": (4, _positive_int, "positive int"),
    "layer_count": (6, lambda v: isinstance(v, int) and v >= 0, "int >= 0"),
    "d_ff": (None, lambda v: v is None or _positive_int(v), "positive int or null (4*d_model)"),
    "lmf_rank": (128, _positive_int, "positive int"),
    "fusion_dim": (256, _positive_int, "positive int"),
    "tabular_embed_dim": (256, _positive_int, "positive int"),
    "lmf_bias_augment": (False, lambda v: isinstance(v, bool), "bool"),
}

_LOSS_SCHEMA = {
    "lambda1": (1.0, lambda v: _number(v) and v > 0, "positive number"),
    "lambda2": (3.0, lambda v: _number(v) and v >= 0, "number >= 0"),
    "lambda3": (3.0, lambda v: _number(v) and v >= 0, "number >= 0"),
    "lambda4": (3.0, lambda v: _number(v) and v >= 0, "number >= 0"),
    "frcl_mean": (False, lambda v: isinstance(v, bool), "bool"),
}

_TRAINER_SCHEMA = {
    "lr": (0.001, lambda v: _number(v) and v > 0, "positive number"),
    "weight_decay": (5e-4, lambda v: _number(v) and v >= 0, "number >= 0"),
    "decoupled_wd": (False, lambda v: isinstance(v, bool), "bool"),
    "batch_size": (16, _positive_int, "positive int"),
    "max_epochs": (100, _positive_int, "positive int"),
    "decay_factor": (0.8, lambda v: _number(v) and 0 < v < 1, "number in (0,1)"),
    "plateau_patience": (2, _positive_int, "positive int"),
    "stop_patience": (6, _positive_int, "positive int"),
    "min_rel_improvement": (1e-6, lambda v: _number(v) and v >= 0, "number >= 0"),
    "precision": ("float64", lambda v: v in ("float32", "float64"), "float32|float64"),
}

_TOP_SCHEMA = {
    "dataset": (None, lambda v: v is None or isinstance(v, str), "path string"),
    "out_dir": (None, lambda v: v is None or isinstance(v, str), "path string"),
    "seed": (0, lambda v: isinstance(v, int) and not isinstance(v, bool) and v >= 0, "int >= 0"),
    "variant": ("full", lambda v: v in VARIANTS, "|".join(VARIANTS)),
    "modalities": (
        list(MODALITIES),
        lambda v: isinstance(v, list) and 2 <= len(v) <= 3 and len(set(v)) == len(v) and all(m in MODALITIES for m in v),
        "2 or 3 distinct of " + "/".join(MODALITIES),
    ),
}

_SECTIONS = {"model": _MODEL_SCHEMA, "loss": _LOSS_SCHEMA, "trainer": _TRAINER_SCHEMA}


def _apply_schema(values: dict, schema: dict, path: str) -> dict:
    out = {}
    for key, (default, check, expect) in schema.items():
        if key in values:
            v = values[key]
            if not check(v):
                raise ConfigError(f"{path}{key}: expected {expect}, got {v!r}")
            out[key] = v
        else:
            out[key] = copy.deepcopy(default)
    for key in values:
        if key not in schema:
            raise ConfigError(f"unknown config key '{path}{key}'")
    return out


def validate_run_config(raw: dict, require_dataset: bool = False) -> dict:
    """Validate and fill a run config, rejecting unknown keys anywhere."""
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    known_sections = set(_SECTIONS)
    top = {k: v for k, v in raw.items() if k not in known_sections}
    cfg = _apply_schema(top, _TOP_SCHEMA, "")
    for section, schema in _SECTIONS.items():
        sub = raw.get(section, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"{section}: expected an object")
        cfg[section] = _apply_schema(sub, schema, f"{section}.")
    if cfg["model"]["d_model"] % cfg["model"]["head_count"] != 0:
        raise ConfigError(
            f"model.d_model={cfg['model']['d_model']} not divisible by head_count={cfg['model']['head_count']}"
        )
    if cfg["model"]["d_ff"] is None:
        cfg["model"]["d_ff"] = 4 * cfg["model"]["d_model"]
    if cfg["model"]["d_ff"] < cfg["model"]["d_model"]:
        raise ConfigError(f"model.d_ff={cfg['model']['d_ff']} must be >= d_model")
    if require_dataset and not cfg["dataset"]:
        raise ConfigError("dataset: required")
    cfg["modalities"] = sorted(cfg["modalities"], key=MODALITIES.index)
    return cfg


def load_run_config(path: str, require_dataset: bool = False) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return validate_run_config(raw, require_dataset=require_dataset)


def config_hash(cfg: dict) -> str:
    """Stable digest of a normalized config (used to key cached runs)."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def desk_scale_config(**overrides) -> dict:
    """Small-dimension defaults sized so experiment suites finish quickly on CPU."""
    cfg = {
        "model": {
            "d_model": 32,
            "head_count": 4,
            "layer_count": 2,
            "lmf_rank": 8,
            "fusion_dim": 32,
            "tabular_embed_dim": 8,
        },
    }
    cfg.update(overrides)
    return validate_run_config(cfg)
