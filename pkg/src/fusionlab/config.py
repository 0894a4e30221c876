"""Experiment configuration.

Config files are JSON objects with flat dotted keys ("train.steps": 2000).
Every kind has a schema of typed fields with defaults; unknown keys are
rejected so typos surface at validation time instead of silently running
defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending field."""


KINDS = (
    "fusion_meml",
    "fusion_memlx",
    "cl_bench",
    "ablation_single_vs_multi",
    "ablation_balanced_vs_unbalanced",
)

CL_METHODS = ("naive", "er", "meml", "meml_memlx")
BALANCE_MODES = ("off", "threshold", "augment", "loss_weight")
INNER_MODES = ("meta_example", "mean_pool", "single_random", "trajectory")


@dataclass
class Field:
    default: object
    kind: type | tuple
    check: object = None  # callable value -> error string or None
    required: bool = False


def _positive(v):
    return None if v > 0 else "must be positive"


def _non_negative(v):
    return None if v >= 0 else "must be >= 0"


def _int_list(v):
    if not isinstance(v, list) or not v or not all(isinstance(x, int) and x > 0 for x in v):
        return "must be a non-empty list of positive integers"
    return None


def _seed_list(v):
    if not isinstance(v, list) or not v or not all(isinstance(x, int) for x in v):
        return "must be a non-empty list of integers"
    return None


def _choice(options):
    def check(v):
        return None if v in options else f"must be one of {sorted(options)}"

    return check


def _choice_list(options):
    def check(v):
        if not isinstance(v, list) or not v:
            return "must be a non-empty list"
        bad = [x for x in v if x not in options]
        return f"unknown entries {bad}; allowed: {sorted(options)}" if bad else None

    return check


_COMMON = {
    "kind": Field(None, str, _choice(KINDS), required=True),
    "seeds": Field(None, list, _seed_list, required=True),
    "out_dir": Field(None, str, required=True),
}

_FUSION = {
    "dataset.num_classes": Field(30, int, _positive),
    "dataset.min_per_class": Field(10, int, _positive),
    "dataset.max_per_class": Field(30, int, _positive),
    "dataset.image_size": Field(14, int, lambda v: None if v >= 7 else "must be >= 7"),
    "dataset.noise_sigma": Field(0.05, (int, float), _non_negative),
    "dataset.train_classes": Field(20, int, _positive),
    "dataset.val_classes": Field(0, int, _non_negative),
    "dataset.test_classes": Field(10, int, _positive),
    "embed.latent_dim": Field(16, int, _positive),
    "embed.hidden": Field(64, int, _positive),
    "embed.epochs": Field(20, int, _non_negative),
    "embed.lr": Field(1e-3, (int, float), _positive),
    "embed.batch_size": Field(32, int, _positive),
    "cluster.k": Field(20, int, lambda v: None if v >= 2 else "must be >= 2"),
    "cluster.max_iters": Field(50, int, _positive),
    "tasks.min_cluster_size": Field(3, int, lambda v: None if v >= 3 else "must be >= 3"),
    "tasks.query_random_count": Field(10, int, _non_negative),
    "tasks.balanced_mode": Field("off", str, _choice(("off", "threshold", "augment"))),
    "model.conv_filters": Field([32, 32, 32], list, _int_list),
    "model.conv_strides": Field([2, 1, 1], list, _int_list),
    "model.attention_hidden": Field(0, int, _non_negative),
    "model.head_hidden": Field(64, int, _non_negative),
    "train.inner_lr": Field(0.1, (int, float), _positive),
    "train.outer_lr": Field(1e-4, (int, float), _positive),
    "train.steps": Field(2000, int, _positive),
    "train.optimizer": Field("adam", str, _choice(("adam", "sgd"))),
    "train.memlx_m": Field(3, int, _positive),
    "test.shots_per_class": Field(5, int, _positive),
    "test.lr": Field(0.1, (int, float), _positive),
    "test.passes": Field(1, int, _positive),
}

_CL = {
    "dataset.source": Field("synthetic", str, _choice(("synthetic", "idx"))),
    "dataset.images": Field("", str),
    "dataset.labels": Field("", str),
    "dataset.test_images": Field("", str),
    "dataset.test_labels": Field("", str),
    "dataset.num_classes": Field(10, int, _positive),
    "dataset.train_per_class": Field(500, int, _positive),
    "dataset.test_per_class": Field(100, int, _positive),
    "dataset.image_size": Field(28, int, lambda v: None if v >= 7 else "must be >= 7"),
    "dataset.max_shift": Field(3, int, _non_negative),
    "dataset.noise_sigma": Field(0.1, (int, float), _non_negative),
    "cl.methods": Field(["naive", "er", "meml"], list, _choice_list(CL_METHODS)),
    "cl.classes_per_task": Field(2, int, _positive),
    "cl.batch_size": Field(10, int, _positive),
    "cl.epochs": Field(1, int, _positive),
    "cl.lr": Field(0.05, (int, float), _positive),
    "cl.buffer_capacity": Field(500, int, _non_negative),
    "cl.inner_lr": Field(0.1, (int, float), _positive),
    "cl.outer_lr": Field(0.1, (int, float), _positive),
    "cl.memlx_m": Field(3, int, _positive),
    "cl.hidden": Field([100, 100], list, _int_list),
}

_ABLATION_SINGLE = {
    "ablation.inner_modes": Field(list(INNER_MODES), list, _choice_list(INNER_MODES)),
}

_ABLATION_BALANCED = {
    "ablation.balance_modes": Field(list(BALANCE_MODES), list, _choice_list(BALANCE_MODES)),
}


def schema_for(kind: str) -> dict[str, Field]:
    schema = dict(_COMMON)
    if kind in ("fusion_meml", "fusion_memlx"):
        schema.update(_FUSION)
    elif kind == "cl_bench":
        schema.update(_CL)
    elif kind == "ablation_single_vs_multi":
        schema.update(_FUSION)
        schema.update(_ABLATION_SINGLE)
    elif kind == "ablation_balanced_vs_unbalanced":
        schema.update(_FUSION)
        schema.update(_ABLATION_BALANCED)
    return schema


@dataclass
class ExperimentConfig:
    """Resolved configuration: every schema field present, defaults applied."""

    kind: str
    seeds: list
    out_dir: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def resolved(self) -> dict:
        return dict(self.values)


def _cross_checks(kind: str, values: dict) -> list[str]:
    issues = []
    if kind in ("fusion_meml", "fusion_memlx", "ablation_single_vs_multi",
                "ablation_balanced_vs_unbalanced"):
        if values["dataset.min_per_class"] > values["dataset.max_per_class"]:
            issues.append("dataset.min_per_class: exceeds dataset.max_per_class")
        wanted = (
            values["dataset.train_classes"]
            + values["dataset.val_classes"]
            + values["dataset.test_classes"]
        )
        if wanted > values["dataset.num_classes"]:
            issues.append(
                f"dataset.train_classes: split requests {wanted} classes, "
                f"dataset has {values['dataset.num_classes']}"
            )
        if len(values["model.conv_filters"]) != len(values["model.conv_strides"]):
            issues.append("model.conv_strides: length must match model.conv_filters")
        if values["test.shots_per_class"] >= values["dataset.min_per_class"]:
            issues.append(
                "test.shots_per_class: must be below dataset.min_per_class "
                "to leave held-out samples"
            )
    if kind == "cl_bench":
        if values["dataset.source"] == "idx":
            for key in ("dataset.images", "dataset.labels", "dataset.test_images",
                        "dataset.test_labels"):
                if not values[key]:
                    issues.append(f"{key}: required when dataset.source is 'idx'")
        if values["dataset.source"] == "synthetic":
            if values["dataset.num_classes"] % values["cl.classes_per_task"] != 0:
                issues.append(
                    "cl.classes_per_task: must divide dataset.num_classes"
                )
    return issues


def resolve(raw: dict) -> tuple[ExperimentConfig | None, list[str]]:
    """Apply defaults and validate; returns (config, issues)."""
    if not isinstance(raw, dict):
        return None, ["top level: config must be a JSON object"]
    kind = raw.get("kind")
    if kind not in KINDS:
        return None, [f"kind: must be one of {list(KINDS)}, got {kind!r}"]
    schema = schema_for(kind)
    issues = [f"{key}: unknown field" for key in raw if key not in schema]
    values: dict = {}
    for key, spec in schema.items():
        if key in raw:
            value = raw[key]
        elif spec.required:
            issues.append(f"{key}: required")
            continue
        else:
            value = spec.default
        if isinstance(value, bool) and spec.kind in (int, (int, float)):
            issues.append(f"{key}: expected a number, got a boolean")
            continue
        if not isinstance(value, spec.kind):
            expected = getattr(spec.kind, "__name__", "number")
            issues.append(f"{key}: expected {expected}, got {type(value).__name__}")
            continue
        if spec.check is not None:
            problem = spec.check(value)
            if problem:
                issues.append(f"{key}: {problem}")
                continue
        values[key] = value
    if issues:
        return None, issues
    issues = _cross_checks(kind, values)
    if issues:
        return None, issues
    return (
        ExperimentConfig(kind=kind, seeds=list(values["seeds"]), out_dir=values["out_dir"],
                         values=values),
        [],
    )


def load_config(path) -> ExperimentConfig:
    """Parse and validate a config file; raises ConfigError on any issue."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file")
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})")
    cfg, issues = resolve(raw)
    if issues:
        raise ConfigError(f"{path}: " + "; ".join(issues))
    return cfg


def validate_file(path) -> list[str]:
    """All validation issues for a config file; empty means valid."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        return [f"{path}: no such file"]
    except json.JSONDecodeError as err:
        return [f"{path}: invalid JSON ({err})"]
    _, issues = resolve(raw)
    return issues
