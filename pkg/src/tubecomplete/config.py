"""Run configuration: defaults, JSON schema validation, precedence merging.

A run config is one JSON document with model, loss, dataset, eval and train
sections.  Values resolve as command-line flag > config file > built-in
default; unknown keys anywhere are rejected before any work starts.
"""

from __future__ import annotations

import copy
import json

import jsonschema

from .cps import CpsConfig
from .errors import ConfigError
from .losses import LossConfig
from .metrics import EvalConfig
from .network import ModelConfig, RefineConfig, TransSAConfig
from .synth import FractureSpec, SyntheticTreeSpec

DEFAULTS = {
    "model": {
        "n_complete": 4096,
        "stages": 2,
        "transsa": {"blocks": 2, "k_group": 16,
                    "centroids": [512, 128], "dims": [128, 256]},
        "refine": {"up_factor": 2, "attention_rounds": 3, "hidden_dim": 256,
                   "neighbor_feats": 4},
        "cps": {"n0_fraction": 0.25, "k_density": 8,
                "sparse_boost": 2.0, "endpoint_radius": None},
    },
    "loss": {"epsilon": 2.7e-3, "gamma": 0.5},
    "dataset": {
        "points": 4096,
        "cases_per_patient": 8,
        "split": {"train": 0.8, "val": 0.0, "test": 0.2},
        "fracture": {"min_ratio": 0.10, "max_ratio": 0.30,
                     "min_break": 1, "max_break": 3, "retry_limit": 50},
        "tree": {"branch_count": 2, "depth": 2,
                 "radius_range": [1.2, 2.4], "curvature_range": [0.10, 0.35],
                 "dims": [64, 64, 64], "aorta_axes": [0.30, 0.30, 0.20]},
    },
    "eval": {"tau": 0.01, "coronary_only": True},
    "train": {"epochs": 30, "lr": 1e-4, "seed": 0},
}

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_complete": _INT,
                "stages": {"type": "integer", "enum": [1, 2]},
                "transsa": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "blocks": _INT,
                        "k_group": _INT,
                        "centroids": {"type": "array", "items": _INT},
                        "dims": {"type": "array", "items": _INT},
                    },
                },
                "refine": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "up_factor": _INT,
                        "attention_rounds": _INT,
                        "hidden_dim": _INT,
                        "neighbor_feats": _INT,
                    },
                },
                "cps": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "n0_fraction": _NUM,
                        "k_density": _INT,
                        "sparse_boost": _NUM,
                        "endpoint_radius": {"type": ["number", "null"]},
                    },
                },
            },
        },
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"epsilon": _NUM, "gamma": _NUM},
        },
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "points": _INT,
                "cases_per_patient": _INT,
                "split": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"train": _NUM, "val": _NUM, "test": _NUM},
                },
                "fracture": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "min_ratio": _NUM, "max_ratio": _NUM,
                        "min_break": _INT, "max_break": _INT,
                        "retry_limit": _INT,
                    },
                },
                "tree": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "branch_count": _INT, "depth": _INT,
                        "radius_range": _PAIR, "curvature_range": _PAIR,
                        "dims": {"type": "array", "items": _INT,
                                 "minItems": 3, "maxItems": 3},
                        "aorta_axes": {"type": "array", "items": _NUM,
                                       "minItems": 3, "maxItems": 3},
                    },
                },
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"tau": _NUM, "coronary_only": {"type": "boolean"}},
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"epochs": _INT, "lr": _NUM, "seed": _INT},
        },
    },
}


def validate(doc: dict):
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_run_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, deep-merged with the config file, then with overrides.

    Both the file document and the final merge are schema-validated, so a
    config file cannot smuggle unknown keys past a permissive override.
    """
    doc = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                file_doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        validate(file_doc)
        doc = _merge(doc, file_doc)
    if overrides:
        doc = _merge(doc, overrides)
    validate(doc)
    return doc


# builders from the validated document to the typed configs

def model_config(doc: dict) -> ModelConfig:
    m = doc["model"]
    return ModelConfig(
        n_complete=m["n_complete"],
        stages=m["stages"],
        transsa=TransSAConfig(
            blocks=m["transsa"]["blocks"], k_group=m["transsa"]["k_group"],
            centroids=tuple(m["transsa"]["centroids"]),
            dims=tuple(m["transsa"]["dims"]),
        ),
        refine=RefineConfig(**m["refine"]),
        cps=CpsConfig(**m["cps"]),
    )


def loss_config(doc: dict) -> LossConfig:
    return LossConfig(epsilon=doc["loss"]["epsilon"], gamma=doc["loss"]["gamma"],
                      cps=CpsConfig(**doc["model"]["cps"]))


def eval_config(doc: dict) -> EvalConfig:
    return EvalConfig(**doc["eval"])


def fracture_spec(doc: dict, seed: int = 0) -> FractureSpec:
    f = doc["dataset"]["fracture"]
    return FractureSpec(
        min_ratio=f["min_ratio"], max_ratio=f["max_ratio"],
        min_break=f["min_break"], max_break=f["max_break"],
        seed=seed, retry_limit=f["retry_limit"],
    )


def tree_spec(doc: dict, seed: int = 0) -> SyntheticTreeSpec:
    t = doc["dataset"]["tree"]
    return SyntheticTreeSpec(
        branch_count=t["branch_count"], depth=t["depth"],
        radius_range=tuple(t["radius_range"]),
        curvature_range=tuple(t["curvature_range"]),
        dims=tuple(t["dims"]), aorta_axes=tuple(t["aorta_axes"]), seed=seed,
    )
