"""Experiment configuration: YAML files with one section per pipeline stage,
command-line overrides, validation before any training starts."""
from __future__ import annotations

import copy

import yaml

from .errors import ConfigError
from .poisoning import LossWeights, PoisonPlan, STRATEGIES
from .training import AugmentConfig, TrainConfig

SECTIONS = ("dataset", "partition", "trigger", "poison", "train", "defense", "output")

DEFAULTS = {
    "seed": 0,
    "dataset": {
        "name": "blobs",
        "root": "./data",
        "per_class_cap": None,
        # synthetic-blob generator knobs (ignored for cifar10)
        "num_classes": 6,
        "modes": 4,
        "image_size": 16,
        "per_class_train": 400,
        "per_class_test": 100,
        "noise": 0.10,
        "class_amp": 6.0,
        "mode_amp": 3.0,
        "remap": None,
    },
    "partition": {
        "kind": "explicit",      # explicit | class | kmeans | gmm | surrogate
        "n": 4,
        "seed": 0,
        "attributes": ["mode"],
        "cluster": "kmeans",     # clustering behind the surrogate
        "encoder": "clean-model",  # pixels | clean-model | path to a checkpoint
        "encoder_epochs": 8,
        "surrogate_epochs": None,  # defaults to train.epochs
        "balance_slack": 0.2,
    },
    "trigger": {
        "patch": 4,
        "colors": None,
    },
    "poison": {
        "strategy": "focus",
        "victim": 0,
        "target": None,          # defaults to last class
        "attack_fraction": 0.1,
        "focus_fraction": 0.1,
        "label_fraction": 0.1,
        "adversarial_fraction": None,
        "weights": {"benign": 1.0, "attack": 1.0, "label_specific": 1.0, "dynamic": 1.0},
        "seed": 0,
    },
    "train": {
        "arch": "small-cnn",
        "epochs": 20,
        "batch_size": 128,
        "optimizer": "sgd",
        "lr": 0.02,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "schedule": "cosine",
        "seed": 1,
        "device": "auto",
        "deterministic": True,
        "augment": {"enabled": False, "crop_pad": 2, "flip_prob": 0.5, "noise_std": 0.0},
    },
    "defense": {
        "methods": ["inversion", "strip", "spectral", "fine-tune"],
        "inversion": {"steps": 300, "lr": 0.1, "lambda_init": 1e-2,
                      "success_threshold": 0.97, "restarts": 2, "sample_cap": 100,
                      "patience": 5, "seed": 0},
        "strip": {"n_blends": 100, "n_samples": 200, "seed": 0},
        "spectral": {"n_samples": 200},
        "fine_tune": {"fraction": 0.05, "epochs": 20, "lr": 0.02, "weight_decay": 1e-3,
                      "seed": 3,
                      "augment": {"enabled": True, "crop_pad": 2, "flip_prob": 0.5,
                                  "noise_std": 0.05}},
        "fine_prune": {"fraction": 0.2},
        "adaptive": {"enabled": False, "guess": "pixels-kmeans", "seed": 0},
    },
    "output": {
        "run_dir": "runs/attack",
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def load_config(path: str) -> dict:
    try:
        with open(path) as f:
            doc = yaml.safe_load(f) or {}
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be a mapping, got {type(doc).__name__}")
    return merge_config(default_config(), doc)


def merge_config(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_overrides(doc: dict, pairs: list[str]) -> dict:
    """Apply `section.key=value` overrides; values are parsed as YAML scalars."""
    out = copy.deepcopy(doc)
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like section.key=value, got {pair!r}")
        dotted, raw = pair.split("=", 1)
        keys = dotted.strip().split(".")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
        node = out
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                node[k] = {}
            node = node[k]
        node[keys[-1]] = value
    return out


def resolved_yaml(doc: dict) -> str:
    return yaml.safe_dump(doc, sort_keys=False)


# ---------------------------------------------------------------------------
# Typed builders + validation
# ---------------------------------------------------------------------------

def dataset_num_classes(doc: dict) -> int | None:
    ds = doc["dataset"]
    name = str(ds["name"]).lower()
    n = None
    if name in ("blobs", "synthetic-blobs"):
        n = int(ds["num_classes"])
    elif name in ("cifar10", "cifar10-subset"):
        n = 10
    if n is not None and ds.get("remap"):
        n = len(set(ds["remap"].values()))
    return n


def make_train_config(doc: dict, **overrides) -> TrainConfig:
    sec = dict(doc["train"])
    sec.update(overrides)
    aug = sec.pop("augment", {})
    try:
        return TrainConfig(augment=AugmentConfig(**aug), **sec)
    except TypeError as exc:
        raise ConfigError(f"bad train section: {exc}") from exc


def make_poison_plan(doc: dict) -> PoisonPlan:
    sec = dict(doc["poison"])
    sec.pop("seed", None)
    weights = sec.pop("weights", {})
    target = sec.pop("target", None)
    if target is None:
        n = dataset_num_classes(doc)
        if n is None:
            raise ConfigError("poison.target must be set when the class count is unknown")
        target = n - 1
    try:
        return PoisonPlan(n_partitions=int(doc["partition"]["n"]), target=int(target),
                          weights=LossWeights(**weights), **sec)
    except TypeError as exc:
        raise ConfigError(f"bad poison section: {exc}") from exc


def make_inversion_config(doc: dict):
    from .defense import InversionConfig
    try:
        return InversionConfig(**doc["defense"]["inversion"])
    except TypeError as exc:
        raise ConfigError(f"bad defense.inversion section: {exc}") from exc


def validate_config(doc: dict) -> None:
    """Static cross-section checks; raises ConfigError before any training."""
    unknown = set(doc) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section in SECTIONS:
        if section not in doc:
            raise ConfigError(f"missing config section {section!r}")
        known = set(DEFAULTS[section])
        extra = set(doc[section]) - known
        if extra:
            raise ConfigError(f"unknown keys in {section!r}: {sorted(extra)}")

    part = doc["partition"]
    if part["kind"] not in ("explicit", "class", "kmeans", "gmm", "surrogate"):
        raise ConfigError(f"unknown partition kind {part['kind']!r}")
    n = int(part["n"])
    if not 1 <= n <= 8:
        raise ConfigError(f"partition.n must lie in 1..8, got {n}")

    from .errors import PoisonError
    try:
        plan = make_poison_plan(doc)
    except PoisonError as exc:
        raise ConfigError(str(exc)) from exc

    num_classes = dataset_num_classes(doc)
    if num_classes is not None:
        for name, value in (("victim", plan.victim), ("target", plan.target)):
            if not 0 <= value < num_classes:
                raise ConfigError(
                    f"poison.{name}={value} out of range for {num_classes} classes")

    if doc["poison"]["strategy"] not in STRATEGIES:
        raise ConfigError(f"unknown poison strategy {doc['poison']['strategy']!r}")

    from .errors import TrainingError
    try:
        make_train_config(doc)
    except TrainingError as exc:
        raise ConfigError(str(exc)) from exc

    patch = int(doc["trigger"]["patch"])
    if patch < 0:
        raise ConfigError("trigger.patch must be >= 0")
