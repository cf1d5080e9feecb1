"""Run configuration: one JSON document with a section per pipeline stage.

Unknown keys anywhere in the document are rejected, every omitted key is
filled from the defaults below, and the fully resolved document is persisted
next to each run's artifacts so a run can be reconstructed from its
directory alone. Command-line overrides use dotted paths
(``--set pretrain.epochs=5``) and are applied after the file is read.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .augmentation import AugmentationPolicy
from .errors import ConfigError
from .models import EncoderSpec, ProjectionHeadSpec, SegmentationHeadSpec
from .training import OptimizerConfig, StageConfig

DEFAULTS: dict = {
    "data": {
        "train_volume": None,
        "train_labels": None,
        "test_volumes": [],
        "test_labels": [],
        "num_test_splits": 3,
    },
    "labels": {
        "num_partitions": 100,
    },
    "augmentation": {
        "crop_size": 224,
        "crop_scale": [0.2, 1.0],
        "flip_probability": 0.5,
        "jitter_brightness": 0.4,
        "jitter_contrast": 0.4,
        "normalization": "volume",  # or explicit [mean, std]
    },
    "model": {
        "encoder_family": "resnet18",
        "input_channels": 1,
        "output_stride": 16,
        "projection_hidden_dim": 512,
        "projection_out_dim": 128,
        "head_variant": "aspp",
        "head_channels": 128,
        "atrous_rates": [6, 12, 18],
        "num_classes": None,
    },
    "pretrain": {
        "epochs": 50,
        "batch_size": 64,
        "seed": 0,
        "temperature": 0.07,
        "pair_strategy": "volume_labels",
        "views_per_slice": 2,
        "drop_last": False,
        "loss_reduction": "mean",
        "checkpoint": None,  # filled by cmd_pretrain; read by cmd_finetune
    },
    "finetune": {
        "epochs": 20,
        "batch_size": 16,
        "seed": 1,
        "drop_last": False,
        "checkpoint": None,  # filled by cmd_finetune; read by cmd_evaluate
    },
    "optimizer": {
        "kind": "sgd",
        "learning_rate": 0.001,
        "momentum": 0.9,
    },
    "output": {
        "dir": "runs",
        "run_name": None,
    },
}


def _reject_unknown_keys(payload: dict, reference: dict, prefix: str = ""):
    for key, value in payload.items():
        if key not in reference:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        if isinstance(reference[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {prefix + key!r} must be an object")
            _reject_unknown_keys(value, reference[key], prefix=f"{prefix}{key}.")


def _merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_override(document: dict, dotted_key: str, raw_value: str) -> dict:
    """Set one dotted-path key (value parsed as JSON, else kept as a string)."""
    parts = dotted_key.split(".")
    node = document
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config section {dotted_key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted_key!r}")
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    node[parts[-1]] = value
    return document


class RunConfig:
    """Validated, fully resolved pipeline configuration."""

    def __init__(self, document: dict | None = None):
        document = document or {}
        if not isinstance(document, dict):
            raise ConfigError("config document must be a JSON object")
        _reject_unknown_keys(document, DEFAULTS)
        self.document = _merge(DEFAULTS, document)

    @classmethod
    def load(cls, path, overrides: list[str] | None = None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            document = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        cfg = cls(document)
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"--set expects key.path=value, got {item!r}")
            dotted, raw = item.split("=", 1)
            apply_override(cfg.document, dotted.strip(), raw.strip())
        return cfg

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.document, indent=2, sort_keys=True) + "\n")
        return path

    # ----------------------------------------------------------- accessors

    def section(self, name: str) -> dict:
        return self.document[name]

    def require(self, section: str, key: str):
        value = self.document[section][key]
        if value is None or value == []:
            raise ConfigError(f"config key {section}.{key!r} is required here")
        return value

    # ------------------------------------------------------------ builders

    def augmentation_policy(
        self, mode: str, normalization: tuple[float, float] | None = None
    ) -> AugmentationPolicy:
        aug = self.document["augmentation"]
        if normalization is None:
            raw = aug["normalization"]
            if raw == "volume":
                raise ConfigError(
                    "normalization='volume' needs stats computed from the train volume"
                )
            normalization = (float(raw[0]), float(raw[1]))
        return AugmentationPolicy(
            crop_size=int(aug["crop_size"]),
            crop_scale=tuple(aug["crop_scale"]),
            flip_probability=float(aug["flip_probability"]),
            jitter_brightness=float(aug["jitter_brightness"]),
            jitter_contrast=float(aug["jitter_contrast"]),
            normalization=normalization,
            mode=mode,
        )

    def encoder_spec(self) -> EncoderSpec:
        model = self.document["model"]
        return EncoderSpec(
            family=model["encoder_family"],
            input_channels=int(model["input_channels"]),
            output_stride=int(model["output_stride"]),
        )

    def projection_spec(self) -> ProjectionHeadSpec:
        model = self.document["model"]
        return ProjectionHeadSpec(
            in_dim=self.encoder_spec().feature_dim,
            hidden_dim=int(model["projection_hidden_dim"]),
            out_dim=int(model["projection_out_dim"]),
        )

    def head_spec(self) -> SegmentationHeadSpec:
        model = self.document["model"]
        num_classes = self.require("model", "num_classes")
        return SegmentationHeadSpec(
            in_channels=self.encoder_spec().feature_dim,
            num_classes=int(num_classes),
            atrous_rates=tuple(model["atrous_rates"]),
            head_channels=int(model["head_channels"]),
            variant=model["head_variant"],
        )

    def stage_config(self, stage: str) -> StageConfig:
        if stage == "pretrain":
            pre = self.document["pretrain"]
            strategy = pre["pair_strategy"]
            return StageConfig(
                stage="pretrain",
                epochs=int(pre["epochs"]),
                batch_size=int(pre["batch_size"]),
                seed=int(pre["seed"]),
                temperature=float(pre["temperature"]),
                num_partitions=(
                    int(self.document["labels"]["num_partitions"])
                    if strategy == "volume_labels"
                    else None
                ),
                pair_strategy=strategy,
                views_per_slice=int(pre["views_per_slice"]),
                drop_last=bool(pre["drop_last"]),
                loss_reduction=pre["loss_reduction"],
            )
        if stage == "finetune":
            fin = self.document["finetune"]
            return StageConfig(
                stage="finetune",
                epochs=int(fin["epochs"]),
                batch_size=int(fin["batch_size"]),
                seed=int(fin["seed"]),
                drop_last=bool(fin["drop_last"]),
            )
        raise ConfigError(f"unknown stage {stage!r}")

    def optimizer_config(self) -> OptimizerConfig:
        opt = self.document["optimizer"]
        return OptimizerConfig(
            kind=opt["kind"],
            learning_rate=float(opt["learning_rate"]),
            momentum=float(opt["momentum"]),
        )
