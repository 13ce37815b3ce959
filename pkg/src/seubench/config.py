"""JSON run configuration: schema, defaults and semantic validation."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

from .campaign import VARIANTS, CampaignConfig
from .errors import SeuBenchError
from .tensor import ActivationKind


class ConfigError(SeuBenchError):
    """The configuration is malformed or violates a precondition."""


_fraction = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
_pos_int = {"type": "integer", "minimum": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "levels": _pos_int,
                "base_filters": _pos_int,
                "input_shape": {"type": "array", "items": _pos_int, "minItems": 3, "maxItems": 3},
                "classes": _pos_int,
                "activation": {"enum": [a.value for a in ActivationKind]},
                "seed": {"type": "integer", "minimum": 0},
                "init": {"enum": ["he", "glorot"]},
                "bn_eps": {"type": "number", "exclusiveMinimum": 0},
                "weights": {"type": ["string", "null"]},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seed": {"type": "integer", "minimum": 0},
                "count": _pos_int,
                "seeds_per_class": _pos_int,
                "noise": {"type": "number", "minimum": 0},
            },
        },
        "campaign": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "margin": _fraction,
                "confidence": _fraction,
                "failure_prob": _fraction,
                "bits": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": 31}, "minItems": 1},
                "seed": {"type": "integer", "minimum": 0},
                "variant": {"enum": list(VARIANTS)},
                "n_override": {"type": ["integer", "null"], "minimum": 1},
                "population_unit": {"enum": ["set_bit", "set"]},
                "param_sets": {"type": ["array", "null"], "items": {"type": "string"}},
                "images": {"type": ["integer", "null"], "minimum": 1},
                "msb_metric": {"enum": ["critical", "pixel"]},
            },
        },
        "prune": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "targets": {"type": "array", "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}, "minItems": 1},
                "tolerance": {"type": "number", "minimum": 0},
                "max_degradation": {"type": "number", "minimum": 0},
                "images": {"type": ["integer", "null"], "minimum": 1},
                "reference": {"enum": ["golden", "labels"]},
            },
        },
        "quantize": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"calibration_images": _pos_int},
        },
        "io": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "output_dir": {"type": "string"},
                "dataset": {"type": ["string", "null"]},
            },
        },
    },
}

DEFAULTS = {
    "model": {
        "levels": 3,
        "base_filters": 8,
        "input_shape": [32, 32, 4],
        "classes": 5,
        "activation": "relu",
        "seed": 0,
        "init": "he",
        "bn_eps": 1e-3,
        "weights": None,
    },
    "data": {"seed": 1, "count": 4, "seeds_per_class": 2, "noise": 0.1},
    "campaign": {
        "margin": 0.025,
        "confidence": 0.95,
        "failure_prob": 0.5,
        "bits": list(range(31, 22, -1)),
        "seed": 0,
        "variant": "fp32",
        "n_override": None,
        "population_unit": "set_bit",
        "param_sets": None,
        "images": None,
        "msb_metric": "critical",
    },
    "prune": {"targets": [0.5, 0.5], "tolerance": 0.02, "max_degradation": 1.5, "images": None, "reference": "golden"},
    "quantize": {"calibration_images": 4},
    "io": {"output_dir": "run", "dataset": None},
}


def with_defaults(doc: dict) -> dict:
    out = copy.deepcopy(DEFAULTS)
    for section, values in doc.items():
        out[section].update(values)
    return out


def validate(doc: dict) -> dict:
    """Schema check, defaults, then cross-field checks; raises ConfigError."""
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from None
    cfg = with_defaults(doc)
    m = cfg["model"]
    div = 2 ** m["levels"]
    h, w, _ = m["input_shape"]
    if h % div or w % div:
        raise ConfigError(f"model.input_shape {h}x{w} must be divisible by 2**levels = {div}")
    if m["classes"] > 256:
        raise ConfigError("model.classes must be at most 256 (8-bit label maps)")
    if m["classes"] * cfg["data"]["seeds_per_class"] > h * w:
        raise ConfigError("data.seeds_per_class too large for the image extents")
    try:
        campaign_config(cfg)
    except ValueError as exc:
        raise ConfigError(f"campaign: {exc}") from None
    return cfg


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return validate({})
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return validate(doc)


def config_hash(cfg: dict) -> str:
    """Digest of everything except the io section, so relocating a run keeps its hash."""
    body = {k: v for k, v in cfg.items() if k != "io"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def campaign_config(cfg: dict) -> CampaignConfig:
    c = cfg["campaign"]
    return CampaignConfig(
        margin=c["margin"],
        confidence=c["confidence"],
        failure_prob=c["failure_prob"],
        bits=tuple(c["bits"]),
        seed=c["seed"],
        variant=c["variant"],
        n_override=c["n_override"],
        population_unit=c["population_unit"],
        param_sets=None if c["param_sets"] is None else tuple(c["param_sets"]),
    )
