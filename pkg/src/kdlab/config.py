"""Experiment configs: flat ``section.key = value`` text, strictly parsed.

Unknown keys are rejected outright so a typo in a sweep grid cannot be
silently ignored. Exactly one weighting mechanism may be active per run: a
gap-based scheme or the learned uncertainty weighting, never both; when
uncertainty weighting is on, the scheme is canonicalized to ``none``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .weighting import SCHEME_KINDS

TARGETS = ("embedding", "logits", "logits_kl", "feature_map", "attention_map")
TASKS = ("classification", "metric")
DATASET_KINDS = ("synthetic_blobs", "two_spirals", "idx_images")
SCHEMES = ("none",) + SCHEME_KINDS


class ConfigError(ValueError):
    """The config text is malformed or violates a validation rule."""


def _bool(s: str) -> bool:
    if s in ("true", "True", "1"):
        return True
    if s in ("false", "False", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (type converter, default as string). Defaults are strings so a
# resolved config can always be re-serialized and re-parsed losslessly.
SCHEMA: dict[str, tuple] = {
    "dataset.kind": (str, "synthetic_blobs"),
    "dataset.seed": (int, "7"),
    "dataset.num_classes": (int, "6"),
    "dataset.dim": (int, "8"),
    "dataset.train_size": (int, "512"),
    "dataset.test_size": (int, "2048"),
    "dataset.cluster_std": (float, "1.0"),
    "dataset.center_scale": (float, "2.0"),
    "dataset.label_noise": (float, "0.1"),
    "dataset.spiral_noise": (float, "0.15"),
    "dataset.idx_train_images": (str, ""),
    "dataset.idx_train_labels": (str, ""),
    "dataset.idx_test_images": (str, ""),
    "dataset.idx_test_labels": (str, ""),
    "dataset.idx_limit_train": (int, "0"),
    "dataset.idx_limit_test": (int, "0"),
    "task.kind": (str, "classification"),
    "teacher.width": (int, "256"),
    "teacher.depth": (int, "4"),
    "teacher.channels": (str, "16,32"),
    "teacher.embedding_dim": (int, "0"),
    "teacher.epochs": (int, "60"),
    "teacher.batch_size": (int, "64"),
    "teacher.lr": (float, "0.05"),
    "teacher.momentum": (float, "0.9"),
    "teacher.weight_decay": (float, "0.0005"),
    "teacher.lr_drop_epoch": (int, "0"),
    "teacher.lr_drop_factor": (float, "0.1"),
    "student.width": (int, "64"),
    "student.depth": (int, "4"),
    "student.channels": (str, "4,8"),
    "student.embedding_dim": (int, "0"),
    "distill.target": (str, "embedding"),
    "distill.tap": (str, ""),
    "distill.kl_temperature": (float, "4.0"),
    "distill.scheme": (str, "equal"),
    "distill.temperature": (float, "1.0"),
    "distill.alpha": (float, "1.0"),
    "distill.discard_count": (int, "4"),
    "distill.variance_table": (str, ""),
    "distill.lambda": (float, "1.0"),
    "distill.warmup_epochs": (int, "0"),
    "uncertainty.enabled": (_bool, "false"),
    "uncertainty.per_dimension": (_bool, "true"),
    "uncertainty.head_gamma_init": (float, "0.1"),
    "uncertainty.head_lr_scale": (float, "1.0"),
    "uncertainty.head_start_epoch": (int, "0"),
    "optim.lr": (float, "0.05"),
    "optim.momentum": (float, "0.9"),
    "optim.weight_decay": (float, "0.0005"),
    "optim.lr_drop_epoch": (int, "0"),
    "optim.lr_drop_factor": (float, "0.1"),
    "train.epochs": (int, "50"),
    "train.batch_size": (int, "64"),
    "train.triplet_margin": (float, "0.3"),
    "seed": (int, "0"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved run configuration; ``raw`` maps every schema key to
    its canonical string form (what gets serialized and hashed).
    ``explicit`` remembers which keys the user actually wrote, which the
    XOR validation needs to distinguish choices from defaults."""

    raw: dict = field(repr=False)
    explicit: frozenset = frozenset()

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise KeyError(key)
        return SCHEMA[key][0](self.raw[key])

    @property
    def seed(self) -> int:
        return self["seed"]

    def with_overrides(self, overrides: dict[str, str]) -> "ExperimentConfig":
        merged = dict(self.raw)
        for key, value in overrides.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key '{key}'")
            merged[key] = str(value)
        return validate(merged, explicit=set(self.explicit) | set(overrides))


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse config text; unknown keys and malformed lines are errors."""
    explicit: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key '{key}'")
        if key in explicit:
            raise ConfigError(f"line {lineno}: duplicate config key '{key}'")
        explicit[key] = value
    resolved = {key: explicit.get(key, default) for key, (_, default) in SCHEMA.items()}
    return validate(resolved, explicit=set(explicit))


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())


def validate(resolved: dict[str, str], explicit: set[str]) -> ExperimentConfig:
    resolved = dict(resolved)
    for key, value in resolved.items():
        conv = SCHEMA[key][0]
        try:
            conv(value)
        except ValueError as err:
            raise ConfigError(f"config key '{key}': cannot parse {value!r}") from err

    uncertain = _bool(resolved["uncertainty.enabled"])
    if uncertain:
        if "distill.scheme" in explicit and resolved["distill.scheme"] != "none":
            raise ConfigError(
                "exactly one weighting mechanism may be active (XOR rule): "
                "uncertainty.enabled=true excludes distill.scheme="
                f"{resolved['distill.scheme']}"
            )
        resolved["distill.scheme"] = "none"

    cfg = ExperimentConfig(raw=dict(sorted(resolved.items())), explicit=frozenset(explicit))

    if cfg["dataset.kind"] not in DATASET_KINDS:
        raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}")
    if cfg["task.kind"] not in TASKS:
        raise ConfigError(f"task.kind must be one of {TASKS}")
    if cfg["distill.target"] not in TARGETS:
        raise ConfigError(f"distill.target must be one of {TARGETS}")
    if cfg["distill.scheme"] not in SCHEMES:
        raise ConfigError(f"distill.scheme must be one of {SCHEMES}")
    if cfg["distill.lambda"] < 0:
        raise ConfigError("distill.lambda must be non-negative")
    if cfg["distill.warmup_epochs"] < 0:
        raise ConfigError("distill.warmup_epochs must be non-negative")

    if uncertain:
        if cfg["distill.target"] == "logits_kl":
            raise ConfigError("uncertainty weighting applies to squared-error targets, not logits_kl")
    else:
        if cfg["distill.scheme"] == "none":
            raise ConfigError("distill.scheme=none requires uncertainty.enabled=true")
        if cfg["distill.scheme"] == "frozen_variance" and not cfg["distill.variance_table"]:
            raise ConfigError("frozen_variance scheme needs distill.variance_table")
        if cfg["distill.target"] == "logits_kl" and cfg["distill.scheme"] != "equal":
            raise ConfigError("logits_kl target supports only the equal weighting scheme")

    if cfg["task.kind"] == "metric" and cfg["distill.target"] != "embedding":
        raise ConfigError("metric task distills the embedding target only")
    if cfg["distill.target"] in ("feature_map", "attention_map"):
        if cfg["dataset.kind"] != "idx_images":
            raise ConfigError("feature/attention map targets need image (idx_images) data")
        if not cfg["distill.tap"]:
            raise ConfigError("map targets need distill.tap (e.g. conv2)")
    return cfg


def serialize(cfg: ExperimentConfig) -> str:
    """Canonical text form: every key, sorted, one per line. Re-parsing the
    output reproduces the identical resolved config."""
    return "\n".join(f"{k} = {v}" for k, v in sorted(cfg.raw.items())) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize(cfg).encode()).hexdigest()[:12]


def teacher_hash(cfg: ExperimentConfig) -> str:
    """Hash over the keys that determine the teacher checkpoint."""
    keys = [k for k in SCHEMA if k.startswith(("dataset.", "teacher.", "task."))] + ["seed"]
    text = "\n".join(f"{k} = {cfg.raw[k]}" for k in sorted(keys))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def scheme_label(cfg: ExperimentConfig) -> str:
    """Human-readable weighting mechanism label for comparison tables."""
    if cfg["distill.lambda"] == 0:
        return "no_distill"
    label = "uncertainty" if cfg["uncertainty.enabled"] else cfg["distill.scheme"]
    if cfg["distill.warmup_epochs"] > 0:
        label += "+warmup"
    return label
