"""Experiment configuration: flat JSON with a schema_version, validation that
names the offending key, dotted-path overrides, and labeled sub-seed
derivation from the master seed."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import numpy as np

from .datasets import (
    AugmentSpec,
    Dataset,
    channel_stats,
    inject_label_noise,
    load_idx,
    split,
    synth_clusters,
)
from .distill import DEFAULT_ALPHA, DEFAULT_TEMPERATURE
from .models import Model, VggSpec, build_mlp, build_vgg
from .optim import LrSchedule
from .pipeline import DataBundle, EarlyStopConfig, SeedStreams, TrainConfig
from .pruning import PERTURBATIONS, PRUNE_METHODS, PruneConfig

SCHEMA_VERSION = 1

# labeled hashing keeps every stream stable when new labels are added
SEED_LABELS = ("init", "noise", "shuffle", "reinit", "augment", "split", "data")


class ConfigError(ValueError):
    pass


def seed_for(master_seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{master_seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "output_dir": "runs/experiment",
    "model": {
        "family": "mlp",
        "widths": [64],
        "in_features": 64,
        "num_classes": 10,
        "depth": 1,
        "width_exp": 4,
        "in_channels": 1,
    },
    "data": {
        "source": "synth",
        "n": 2000,
        "n_test": 500,
        "image_shape": [1, 8, 8],
        "separation": 1.0,
        "modes_per_class": 1,
        "seed": None,  # defaults to the "data" stream of the master seed
        "images": "",
        "labels": "",
        "test_images": "",
        "test_labels": "",
        "limit": 0,
        "val_fraction": 0.2,
        "noise_epsilon": 0.0,
        "horizontal_flip": False,
        "shift_px": 0,
        "normalize": True,
    },
    "train": {
        "epochs": 10,
        "batch_size": 128,
        "lr": 0.1,
        "milestones": [5, 8],
        "drop_factor": 0.1,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "l1_penalty": 0.0,
    },
    "prune": {
        "zeta": 0.2,
        "zeta_wall": 0.99,
        "method": "magnitude_unstructured",
        "perturbation": "none",
        "rewind_iteration": 0,
        "per_layer": False,
    },
    "distill": {
        "alpha": DEFAULT_ALPHA,
        "temperature": DEFAULT_TEMPERATURE,
        "teacher": "",
    },
    "early_stop": {
        "entropy_threshold": 0.8,
        "accuracy_threshold": 0.8,
        "max_rounds": 31,
    },
}


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, prefix=f"{path}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_override(cfg: dict, dotted_key: str, raw_value: str) -> None:
    """Set one scalar config value from a CLI flag (dotted key path)."""
    node = cfg
    parts = dotted_key.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key '{dotted_key}'")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key '{dotted_key}'")
    try:
        node[leaf] = json.loads(raw_value)
    except json.JSONDecodeError:
        node[leaf] = raw_value  # bare strings allowed


def _require(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"config key '{key}': {message}")


def validate_config(cfg: dict) -> dict:
    _require(cfg.get("schema_version") == SCHEMA_VERSION, "schema_version",
             f"must be {SCHEMA_VERSION}")
    _require(isinstance(cfg["seed"], int), "seed", "must be an integer")
    _require(isinstance(cfg["output_dir"], str) and cfg["output_dir"], "output_dir",
             "must be a non-empty string")

    model = cfg["model"]
    _require(model["family"] in ("mlp", "vgg"), "model.family", "must be 'mlp' or 'vgg'")
    if model["family"] == "mlp":
        _require(isinstance(model["widths"], list) and len(model["widths"]) > 0,
                 "model.widths", "must be a non-empty list")
        _require(all(isinstance(w, int) and w >= 1 for w in model["widths"]),
                 "model.widths", "entries must be integers >= 1")
        _require(model["in_features"] >= 1, "model.in_features", "must be >= 1")
    else:
        _require(1 <= model["depth"] <= 5, "model.depth", "must be in [1, 5]")
        _require(model["width_exp"] >= 3, "model.width_exp", "must be >= 3")
    _require(model["num_classes"] >= 2, "model.num_classes", "must be >= 2")

    data = cfg["data"]
    _require(data["source"] in ("synth", "idx"), "data.source", "must be 'synth' or 'idx'")
    if data["source"] == "synth":
        _require(data["n"] >= data.get("n_test", 0) + 10, "data.n", "too few samples")
    else:
        _require(bool(data["images"]) and bool(data["labels"]), "data.images",
                 "idx source requires images and labels paths")
    _require(0 < data["val_fraction"] < 1, "data.val_fraction", "must be in (0, 1)")
    _require(0 <= data["noise_epsilon"] <= 1, "data.noise_epsilon", "must be in [0, 1]")
    _require(0 <= data["shift_px"] <= 4, "data.shift_px", "must be in [0, 4]")

    train = cfg["train"]
    _require(train["epochs"] >= 0, "train.epochs", "must be >= 0")
    _require(train["batch_size"] >= 1, "train.batch_size", "must be >= 1")
    _require(train["lr"] > 0, "train.lr", "must be positive")
    _require(0 < train["drop_factor"] < 1, "train.drop_factor", "must be in (0, 1)")
    _require(0 <= train["momentum"] < 1, "train.momentum", "must be in [0, 1)")
    _require(train["weight_decay"] >= 0, "train.weight_decay", "must be >= 0")
    _require(train["l1_penalty"] >= 0, "train.l1_penalty", "must be >= 0")

    prune = cfg["prune"]
    _require(0 < prune["zeta"] < 1, "prune.zeta", "must be in (0, 1)")
    _require(0 < prune["zeta_wall"] <= 1, "prune.zeta_wall", "must be in (0, 1]")
    _require(prune["method"] in PRUNE_METHODS, "prune.method",
             f"must be one of {PRUNE_METHODS}")
    _require(prune["perturbation"] in PERTURBATIONS, "prune.perturbation",
             f"must be one of {PERTURBATIONS}")
    _require(prune["rewind_iteration"] >= 0, "prune.rewind_iteration", "must be >= 0")

    distill = cfg["distill"]
    _require(0 <= distill["alpha"] <= 1, "distill.alpha", "must be in [0, 1]")
    _require(distill["temperature"] > 0, "distill.temperature", "must be positive")

    es = cfg["early_stop"]
    _require(0 < es["entropy_threshold"] < 1, "early_stop.entropy_threshold",
             "must be in (0, 1)")
    _require(0 < es["accuracy_threshold"] < 1, "early_stop.accuracy_threshold",
             "must be in (0, 1)")
    _require(es["max_rounds"] >= 1, "early_stop.max_rounds", "must be >= 1")
    return cfg


def load_config(path, overrides: list[tuple[str, str]] | None = None) -> dict:
    """Read a JSON config, apply CLI overrides, merge defaults, validate."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = _merge(DEFAULT_CONFIG, raw)
    for key, value in overrides or []:
        apply_override(cfg, key, value)
    return validate_config(cfg)


# ---- assembly --------------------------------------------------------------


def make_model(model_cfg: dict, seed: int, dtype=np.float32) -> Model:
    rng = np.random.default_rng(seed)
    if model_cfg["family"] == "mlp":
        return build_mlp(model_cfg["widths"], model_cfg["in_features"],
                         model_cfg["num_classes"], rng, dtype)
    spec = VggSpec(depth=model_cfg["depth"], width_exp=model_cfg["width_exp"],
                   in_channels=model_cfg["in_channels"],
                   num_classes=model_cfg["num_classes"])
    return build_vgg(spec, rng, dtype)


def make_data(cfg: dict) -> DataBundle:
    """Builds the train/val/test bundle for a config.

    Label noise is injected before splitting, so the validation split shares
    the train-set noise process; the test set is never noise-injected.
    """
    data_cfg = cfg["data"]
    master = cfg["seed"]
    num_classes = cfg["model"]["num_classes"]
    if data_cfg["source"] == "synth":
        data_seed = data_cfg["seed"]
        if data_seed is None:
            data_seed = seed_for(master, "data")
        full = synth_clusters(data_cfg["n"], num_classes, tuple(data_cfg["image_shape"]),
                              data_cfg["separation"], data_seed,
                              modes_per_class=data_cfg["modes_per_class"])
        n_test = data_cfg["n_test"]
        pool = Dataset(images=full.images[n_test:], labels=full.labels[n_test:],
                       num_classes=num_classes)
        test = Dataset(images=full.images[:n_test], labels=full.labels[:n_test],
                       num_classes=num_classes)
    else:
        pool = load_idx(data_cfg["images"], data_cfg["labels"])
        test = load_idx(data_cfg["test_images"], data_cfg["test_labels"])
        limit = data_cfg["limit"]
        if limit:
            pool = Dataset(images=pool.images[:limit], labels=pool.labels[:limit],
                           num_classes=pool.num_classes)
        if pool.num_classes > num_classes:
            raise ConfigError(f"config key 'model.num_classes': dataset has "
                              f"{pool.num_classes} classes, model has {num_classes}")
        num_classes = pool.num_classes

    epsilon = data_cfg["noise_epsilon"]
    clean = pool.labels
    if epsilon > 0:
        noisy, _ = inject_label_noise(pool.labels, epsilon, seed_for(master, "noise"),
                                      num_classes)
        pool = Dataset(images=pool.images, labels=noisy, num_classes=num_classes,
                       clean_labels=clean)
    train_set, val_set = split(pool, data_cfg["val_fraction"], seed_for(master, "split"))

    norm = None
    if data_cfg["normalize"]:
        norm = channel_stats(train_set.images)
    aug = AugmentSpec(horizontal_flip=data_cfg["horizontal_flip"],
                      shift_px=data_cfg["shift_px"], normalize=norm)
    return DataBundle(train=train_set, val=val_set, test=test, augment_spec=aug)


def make_train_cfg(train_cfg: dict) -> TrainConfig:
    schedule = LrSchedule(base_lr=train_cfg["lr"],
                          milestones=list(train_cfg["milestones"]),
                          drop_factor=train_cfg["drop_factor"])
    return TrainConfig(epochs=train_cfg["epochs"], batch_size=train_cfg["batch_size"],
                       schedule=schedule, momentum=train_cfg["momentum"],
                       weight_decay=train_cfg["weight_decay"],
                       l1_penalty=train_cfg["l1_penalty"])


def make_prune_cfg(prune_cfg: dict) -> PruneConfig:
    return PruneConfig(zeta=prune_cfg["zeta"], zeta_wall=prune_cfg["zeta_wall"],
                       method=prune_cfg["method"],
                       perturbation=prune_cfg["perturbation"],
                       rewind_iteration=prune_cfg["rewind_iteration"],
                       per_layer=prune_cfg["per_layer"])


def make_early_stop_cfg(es_cfg: dict) -> EarlyStopConfig:
    return EarlyStopConfig(entropy_threshold=es_cfg["entropy_threshold"],
                           accuracy_threshold=es_cfg["accuracy_threshold"],
                           max_rounds=es_cfg["max_rounds"])


def make_streams(master_seed: int) -> SeedStreams:
    return SeedStreams(
        shuffle=np.random.default_rng(seed_for(master_seed, "shuffle")),
        augment=np.random.default_rng(seed_for(master_seed, "augment")),
        reinit_base=seed_for(master_seed, "reinit"),
    )
