"""Run configuration: YAML documents merged over a complete set of defaults.

Every field has a default here, so the materialized copy written next to a
run's outputs fully determines that run.
"""
import copy
import os
from pathlib import Path

import yaml

from . import backbone as B
from . import data as D
from . import model as M

CONFIG_DIR = Path(__file__).parent / "configs"


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "threads": None,
    "model": {
        "preset": "dfcnet",
        "backbone": "desk",
        "target_channels": None,
        "head_channels": None,
        "output_stride": None,
        "fusion_leaves": None,
        "land_weight": 1.0,
        "road_weight": 1.0,
        "loss_at_full_resolution": False,
    },
    "data": {
        "root": "data/synth",
        "palette": None,
        "num_classes": 4,
        "eval_count": 32,
        "mean": 0.5,
        "std": 0.25,
    },
    "synth": {
        "num_images": 128,
        "image_size": 64,
        "num_classes": 4,
        "road_density": 1.0,
        "cells": [5, 9],
    },
    "augment": {
        "crop_size": 64,
        "land_range": [0.8, 1.25],
        "road_range": [0.5, 1.5],
        "horizontal_flip": True,
    },
    "train": {
        "iterations": 2000,
        "land_batch": 4,
        "road_batch": 4,
        "base_lr": 0.001,
        "power": 0.9,
        "momentum": 0.9,
        "weight_decay": 0.0005,
        "log_interval": 10,
        "eval_interval": 500,
        "checkpoint_interval": 1000,
    },
    "inference": {
        "tile": 64,
        "overlap": 32,
        "scales": [0.75, 1.0, 1.25],
    },
}


def deep_merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "backbone":
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(cfg, ref, path=""):
    for k, v in cfg.items():
        if k not in ref:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(v, dict) and isinstance(ref[k], dict) and ref[k]:
            _check_keys(v, ref[k], path + k + ".")


def load_config(path=None, overrides=None):
    """Defaults <- YAML file <- overrides; environment may set out and threads."""
    doc = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    _check_keys(doc, DEFAULTS)
    cfg = deep_merge(DEFAULTS, doc)
    if os.environ.get("DFCNET_OUT"):
        cfg["out"] = os.environ["DFCNET_OUT"]
    if os.environ.get("DFCNET_THREADS"):
        cfg["threads"] = int(os.environ["DFCNET_THREADS"])
    cfg = deep_merge(cfg, overrides or {})
    validate(cfg)
    return cfg


def validate(cfg):
    t = cfg["train"]
    if t["iterations"] < 1:
        raise ConfigError("train.iterations must be >= 1")
    if t["land_batch"] < 1:
        raise ConfigError("train.land_batch must be >= 1")
    if t["road_batch"] < 0:
        raise ConfigError("train.road_batch must be >= 0")
    if cfg["model"]["preset"] not in M.MODEL_PRESETS:
        raise ConfigError(f"model.preset must be one of {sorted(M.MODEL_PRESETS)}")
    if cfg["synth"]["num_images"] < 1:
        raise ConfigError("synth.num_images must be >= 1")
    inf = cfg["inference"]
    if not 0 <= inf["overlap"] < inf["tile"]:
        raise ConfigError("inference.overlap must be in [0, tile)")
    if not inf["scales"] or any(s <= 0 for s in inf["scales"]):
        raise ConfigError("inference.scales must be positive")


def materialize(cfg, out_dir=None):
    """Write the resolved config to ``<out>/config.yaml`` and return the path."""
    out = Path(out_dir or cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.yaml"
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)
    return path


def palette_from(cfg):
    p = cfg["data"]["palette"]
    if p is None:
        return D.deepglobe_palette(cfg["data"]["num_classes"])
    if isinstance(p, list):
        return D.ClassPalette.from_entries(p)
    path = Path(p)
    if not path.exists() and (CONFIG_DIR / p).exists():
        path = CONFIG_DIR / p
    return D.ClassPalette.from_file(path)


def model_spec_from(cfg, num_classes=None):
    m = cfg["model"]
    if num_classes is None:
        num_classes = palette_from(cfg).num_classes
    bb = m["backbone"]
    backbone = bb if isinstance(bb, str) else B.BackboneSpec.from_dict(bb)
    try:
        spec = M.make_model_spec(m["preset"], backbone, num_classes, m["target_channels"], m["head_channels"],
                                 m["land_weight"], m["road_weight"])
    except (B.SpecError, M.ModelError) as exc:
        raise ConfigError(str(exc)) from exc
    if m["output_stride"] is not None:
        spec.output_stride = int(m["output_stride"])
    if m["fusion_leaves"] is not None:
        spec.fusion_leaves = list(m["fusion_leaves"])
    spec.loss_at_full_resolution = bool(m["loss_at_full_resolution"])
    return spec


def augment_from(cfg):
    a = cfg["augment"]
    return D.AugmentConfig({"land": tuple(a["land_range"]), "road": tuple(a["road_range"])},
                           int(a["crop_size"]), bool(a["horizontal_flip"]))
