"""Confusion-matrix segmentation scoring: per-class IoU and split-averaged MIOU.

Each test split accumulates one confusion matrix over all of its slices
(rows are ground truth, columns are predictions). Per-class IoU is
``diag / (row_sum + col_sum - diag)``; classes absent from both ground truth
and prediction are excluded from the split's mean rather than scored 0 or 1.
The headline statistic is the arithmetic mean of the per-split MIOUs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import models
from .augmentation import AugmentationPolicy, apply_pipeline
from .errors import ConfigError, DataError
from .training import _map_maybe_parallel
from .volume_data import LabelVolume, SeismicVolume, SplitSpec

PredictFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class ConfusionMatrix:
    """C x C pixel counts; counts[t][p] = pixels of true class t predicted p."""

    num_classes: int
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise DataError(
                    f"counts must be {self.num_classes}x{self.num_classes}, "
                    f"got {self.counts.shape}"
                )
            if (self.counts < 0).any():
                raise DataError("confusion counts must be non-negative")

    @property
    def total_pixels(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ConfigError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self


def update_confusion(
    cm: ConfusionMatrix, predictions: np.ndarray, targets: np.ndarray
) -> ConfusionMatrix:
    """Accumulate one image's pixel counts into ``cm`` (in place)."""
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    if predictions.shape != targets.shape:
        raise DataError(
            f"prediction shape {predictions.shape} differs from target shape "
            f"{targets.shape}"
        )
    c = cm.num_classes
    for name, arr in (("predictions", predictions), ("targets", targets)):
        if arr.size and (arr.min() < 0 or arr.max() >= c):
            raise DataError(
                f"{name} must lie in [0, {c}), got range [{arr.min()}, {arr.max()}]"
            )
    flat = targets.astype(np.int64).ravel() * c + predictions.astype(np.int64).ravel()
    cm.counts += np.bincount(flat, minlength=c * c).reshape(c, c)
    return cm


def class_iou(cm: ConfusionMatrix, c: int) -> float | None:
    """IoU of class ``c``; None when the class is absent from gt and prediction."""
    if not 0 <= c < cm.num_classes:
        raise ConfigError(f"class index {c} out of range [0, {cm.num_classes})")
    diag = int(cm.counts[c, c])
    denom = int(cm.counts[c, :].sum()) + int(cm.counts[:, c].sum()) - diag
    if denom == 0:
        return None
    return diag / denom


def mean_iou(cm: ConfusionMatrix) -> float:
    """Mean of per-class IoUs over the classes present in ``cm``."""
    ious = [class_iou(cm, c) for c in range(cm.num_classes)]
    present = [v for v in ious if v is not None]
    if not present:
        raise DataError("no pixels scored: every class is absent")
    return float(np.mean(present))


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total_pixels
    if total == 0:
        raise DataError("no pixels scored")
    return float(np.trace(cm.counts)) / total


@dataclass
class SplitReport:
    """Scores for one test split, from its accumulated confusion matrix."""

    split_id: int
    per_class_iou: list[float | None]
    miou: float
    num_pixels: int

    def to_json(self) -> dict:
        return {
            "split_id": self.split_id,
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "num_pixels": self.num_pixels,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "SplitReport":
        return cls(
            split_id=int(payload["split_id"]),
            per_class_iou=[
                None if v is None else float(v) for v in payload["per_class_iou"]
            ],
            miou=float(payload["miou"]),
            num_pixels=int(payload["num_pixels"]),
        )


def split_report(cm: ConfusionMatrix, split_id: int) -> SplitReport:
    return SplitReport(
        split_id=split_id,
        per_class_iou=[class_iou(cm, c) for c in range(cm.num_classes)],
        miou=mean_iou(cm),
        num_pixels=cm.total_pixels,
    )


def predict_slice(
    bundle: models.SegmentationBundle, image: np.ndarray, policy: AugmentationPolicy
) -> np.ndarray:
    """Per-pixel class predictions for one slice (argmax, lowest index on ties)."""
    if policy.mode != "eval":
        raise ConfigError("prediction needs an eval-mode augmentation policy")
    prepared = apply_pipeline(image, policy)
    x = torch.from_numpy(prepared[None, None, :, :].astype(np.float32))
    if bundle.encoder_spec.input_channels > 1:
        x = x.repeat(1, bundle.encoder_spec.input_channels, 1, 1)
    h, w = x.shape[2], x.shape[3]
    padded, _ = models.pad_to_stride(x, bundle.encoder_spec.output_stride)
    with torch.no_grad():
        fmap, _ = models.encode(bundle.encoder, padded)
        logits = models.segment(bundle.head, fmap, (padded.shape[2], padded.shape[3]))
    scores = logits[0, :, :h, :w].numpy()
    return np.argmax(scores, axis=0).astype(np.int64)


def score_splits(
    splits: list[SplitSpec],
    volumes: dict[int, tuple[SeismicVolume, LabelVolume]],
    predict_fn: PredictFn,
    num_classes: int,
) -> tuple[list[SplitReport], float]:
    """Scores every split with ``predict_fn``; returns reports and their mean MIOU.

    Per-slice confusion matrices are computed independently (parallel when
    VOLCON_NUM_WORKERS > 1) and merged by elementwise sum.
    """
    if not splits:
        raise ConfigError("no test splits provided")
    reports = []
    for split in splits:
        if not split.crossline_ids:
            raise ConfigError(f"split {split.split_id} is empty")

        def score_one(entry):
            volume_id, crossline = entry
            if volume_id not in volumes:
                raise DataError(f"split references unknown volume id {volume_id}")
            vol, labels = volumes[volume_id]
            image = vol.amplitudes[:, crossline, :]
            target = labels.classes[:, crossline, :]
            cm = ConfusionMatrix(num_classes)
            return update_confusion(cm, predict_fn(image), target)

        parts = _map_maybe_parallel(score_one, list(split.crossline_ids))
        merged = parts[0]
        for part in parts[1:]:
            merged.merge(part)
        reports.append(split_report(merged, split.split_id))
    average = float(np.mean([r.miou for r in reports]))
    return reports, average


def evaluate_splits(
    bundle: models.SegmentationBundle,
    splits: list[SplitSpec],
    volumes: dict[int, tuple[SeismicVolume, LabelVolume]],
    policy: AugmentationPolicy,
) -> tuple[list[SplitReport], float]:
    """Score a fine-tuned model on every test split; the headline statistic
    is the arithmetic mean of per-split MIOUs."""
    return score_splits(
        splits,
        volumes,
        lambda image: predict_slice(bundle, image, policy),
        bundle.head_spec.num_classes,
    )


def write_reports(reports: list[SplitReport], average_miou: float, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "splits": [r.to_json() for r in reports],
        "average_miou": average_miou,
    }
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def read_reports(path) -> tuple[list[SplitReport], float]:
    payload = json.loads(Path(path).read_text())
    reports = [SplitReport.from_json(item) for item in payload["splits"]]
    return reports, float(payload["average_miou"])
