"""Run configuration: defaults, JSON-schema validation and derived objects."""

from __future__ import annotations

import copy
import json

import jsonschema

from .backbone import BackboneConfig
from .errors import InputError


def _obj(props, required=None):
    return {
        "type": "object",
        "properties": props,
        "required": list(props) if required is None else required,
        "additionalProperties": False,
    }


_pos = {"type": "integer", "minimum": 1}
_nonneg = {"type": "integer", "minimum": 0}
_posnum = {"type": "number", "exclusiveMinimum": 0}
_nonnegnum = {"type": "number", "minimum": 0}

RUN_CONFIG_SCHEMA = _obj(
    {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "backbone": _obj({"L": _pos, "d": {"type": "integer", "minimum": 4}, "N": _pos, "ffn": _pos, "r": _pos}),
        "stream": _obj({"base_classes": {"type": "integer", "minimum": 2}, "n_way": _pos, "k_shot": _pos, "sessions": _nonneg}),
        "train": _obj({"epochs": _nonneg, "lr": _nonnegnum, "batch": _pos, "s": _posnum, "m": _nonnegnum}),
        "mpcc": _obj({"enabled": {"type": "boolean"}, "per_class": _pos, "iters": _nonneg, "lr": _nonnegnum}),
        "fisher": _obj(
            {"subsample": _nonneg, "classifier": {"enum": ["own", "generalization"]}},
            required=["subsample"],
        ),
        # only the CLI fills these; everything else is required
        "paths": _obj(
            {"fixture": {"type": "string"}, "checkpoint_dir": {"type": "string"}, "report_out": {"type": "string"}},
            required=[],
        ),
    },
    required=["seed", "backbone", "stream", "train", "mpcc", "fisher"],
)

# Desk-scale defaults. s, m, epochs and the MPCC batch size follow the
# reference schedule; both learning rates are raised because the toy
# backbone's gradients are far smaller. fisher.subsample 0 means the full
# base set; fisher.classifier picks whose head scores each adapter set.
DEFAULT_CONFIG = {
    "seed": 0,
    "backbone": {"L": 2, "d": 32, "N": 16, "ffn": 64, "r": 4},
    "stream": {"base_classes": 20, "n_way": 5, "k_shot": 5, "sessions": 4},
    "train": {"epochs": 20, "lr": 0.1, "batch": 48, "s": 16.0, "m": 0.2},
    "mpcc": {"enabled": True, "per_class": 256, "iters": 50, "lr": 0.5},
    "fisher": {"subsample": 0, "classifier": "own"},
}


def default_config(**overrides):
    """Deep copy of the defaults with ``section__key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    for key, value in overrides.items():
        if "__" in key:
            section, name = key.split("__", 1)
            cfg[section][name] = value
        else:
            cfg[key] = value
    return cfg


def validate_config(cfg):
    try:
        jsonschema.validate(cfg, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"invalid run config at {where}: {exc.message}") from exc
    b = cfg["backbone"]
    if b["r"] >= b["d"]:
        raise InputError("backbone.r must be smaller than backbone.d")
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: malformed JSON ({exc})") from exc
    return validate_config(cfg)


def backbone_config(cfg, patch_dim):
    b = cfg["backbone"]
    return BackboneConfig(
        num_layers=b["L"], embed_dim=b["d"], num_patches=b["N"], patch_dim=patch_dim, ffn_hidden=b["ffn"], rank=b["r"]
    )
