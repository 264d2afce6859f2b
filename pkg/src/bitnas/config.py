"""JSON run configuration: documented defaults, strict key validation.

Unknown keys anywhere in the tree are rejected with their full path.
Missing keys take the defaults below, which mirror the CIFAR recipe
(weight SGD lr 0.2 / momentum 0.9 / decay 5e-4, theta Adam lr 5e-3 /
decay 1e-3, beta 0.1, gamma 0.9, T0 5.0, eta 0.025, 90 search epochs,
160 child epochs with cutout).  The resolved configuration is echoed into
every run directory.
"""

from __future__ import annotations

import copy
import json
from typing import List, Optional, Tuple

from .cost import CostConfig
from .data import Dataset, SyntheticSpec, generate_synthetic, load_cifar10
from .supernet import (
    BlockSpec, PrecisionCandidate, SuperNetSpec,
    cifar_weight_menu, default_weight_act_menu, resnet20_cifar_spec,
)


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "data": {
        "source": "synthetic",
        "path": None,
        "classes": 10,
        "image_size": 16,
        "channels": 3,
        "train_per_class": 200,
        "test_per_class": 50,
        "noise": 0.1,
        "seed": 0,
        "subset_per_class": None,
    },
    "space": {
        "preset": None,
        "menu": "pairs",
        "input_shape": None,
        "num_classes": None,
        "stem_channels": 8,
        "blocks": None,
    },
    "search": {
        "epochs": 90,
        "warmup": 10,
        "batch_size": 512,
        "t0": 5.0,
        "eta": 0.025,
        "sample_every": 10,
        "samples_per_event": 5,
        "split_ratio": 0.8,
        "lr": 0.2,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "theta_lr": 5e-3,
        "theta_weight_decay": 1e-3,
        "mask_per_example": False,
    },
    "cost": {
        "objective": "model-size",
        "beta": 0.1,
        "gamma": 0.9,
        "auto_calibrate_beta": True,
    },
    "child": {
        "epochs": 160,
        "batch_size": 128,
        "lr": 0.2,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "cutout": 16,
    },
    "oracle": {
        "limit": 4096,
        "epochs": 8,
        "batch_size": 128,
        "lr": 0.2,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "cutout": 0,
    },
}

_BLOCK_KEYS = {"id", "out_channels", "stride", "candidates"}
_CANDIDATE_KEYS = {"kind", "w_bits", "a_bits"}


def resolve_config(obj: dict, defaults: dict = None, path: str = "") -> dict:
    """Overlay user keys onto defaults; unknown keys fail with their path."""
    if defaults is None:
        defaults = DEFAULTS
    if not isinstance(obj, dict):
        raise ConfigError(f"expected an object at {path or '<root>'}")
    out = {}
    for key, val in obj.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key: {path}{key}")
        d = defaults[key]
        if isinstance(d, dict):
            out[key] = resolve_config(val, d, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(val)
    for key, d in defaults.items():
        if key not in out:
            out[key] = copy.deepcopy(d)
    return out


def load_config(path) -> dict:
    with open(path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})")
    return resolve_config(obj)


# --------------------------------------------------------------------------
# section builders
# --------------------------------------------------------------------------

def _parse_menu(name: str, skip_ok: bool):
    if name == "pairs":
        return default_weight_act_menu(skip_ok)
    if name == "weights":
        return cifar_weight_menu(skip_ok)
    raise ConfigError(f"space.menu must be 'pairs' or 'weights', got {name!r}")


def _parse_candidate(obj, path: str) -> PrecisionCandidate:
    if not isinstance(obj, dict):
        raise ConfigError(f"expected a candidate object at {path}")
    for key in obj:
        if key not in _CANDIDATE_KEYS:
            raise ConfigError(f"unknown config key: {path}.{key}")
    try:
        return PrecisionCandidate.from_json(obj)
    except (KeyError, ValueError) as e:
        raise ConfigError(f"{path}: {e}")


def build_space(cfg: dict) -> SuperNetSpec:
    """The `space` section resolved into a SuperNetSpec."""
    preset = cfg["preset"]
    if preset == "resnet20":
        return resnet20_cifar_spec(_parse_menu(cfg["menu"], skip_ok=True))
    if preset is not None:
        raise ConfigError(f"unknown space.preset {preset!r}")
    if cfg["blocks"] is None:
        raise ConfigError("space.blocks required when no preset is given")
    if cfg["input_shape"] is None or cfg["num_classes"] is None:
        raise ConfigError("space.input_shape and space.num_classes are required")

    blocks: List[BlockSpec] = []
    cin = cfg["stem_channels"]
    for i, b in enumerate(cfg["blocks"]):
        bpath = f"space.blocks[{i}]"
        if not isinstance(b, dict):
            raise ConfigError(f"expected an object at {bpath}")
        for key in b:
            if key not in _BLOCK_KEYS:
                raise ConfigError(f"unknown config key: {bpath}.{key}")
        cout = b.get("out_channels", cin)
        stride = b.get("stride", 1)
        if "candidates" in b:
            cands = tuple(_parse_candidate(c, f"{bpath}.candidates[{j}]")
                          for j, c in enumerate(b["candidates"]))
        else:
            cands = _parse_menu(cfg["menu"], skip_ok=(stride == 1 and cin == cout))
        try:
            blocks.append(BlockSpec(b.get("id", f"b{i}"), cin, cout, stride, cands))
        except ValueError as e:
            raise ConfigError(f"{bpath}: {e}")
        cin = cout
    return SuperNetSpec(tuple(cfg["input_shape"]), cfg["num_classes"],
                        cfg["stem_channels"], tuple(blocks))


def build_datasets(cfg: dict) -> Tuple[Dataset, Dataset]:
    """The `data` section resolved into (train, test)."""
    if cfg["source"] == "synthetic":
        spec = SyntheticSpec(
            classes=cfg["classes"], image_size=cfg["image_size"],
            channels=cfg["channels"], train_per_class=cfg["train_per_class"],
            test_per_class=cfg["test_per_class"], noise=cfg["noise"],
            seed=cfg["seed"])
        return generate_synthetic(spec)
    if cfg["source"] == "cifar10":
        if not cfg["path"]:
            raise ConfigError("data.path required for the cifar10 source")
        train, test = load_cifar10(cfg["path"])
        per_class = cfg["subset_per_class"]
        if per_class:
            train = _stratified_head(train, per_class)
            test = _stratified_head(test, max(per_class // 4, 1))
        return train, test
    raise ConfigError(f"data.source must be 'synthetic' or 'cifar10', "
                      f"got {cfg['source']!r}")


def _stratified_head(ds: Dataset, per_class: int) -> Dataset:
    import numpy as np
    keep = []
    for c in range(ds.num_classes):
        keep.extend(np.flatnonzero(ds.labels == c)[:per_class])
    return ds.subset(sorted(keep))


def build_cost_config(cfg: dict) -> CostConfig:
    try:
        return CostConfig(cfg["objective"], cfg["beta"], cfg["gamma"],
                          cfg["auto_calibrate_beta"])
    except ValueError as e:
        raise ConfigError(f"cost: {e}")
