"""Two-stage training: contrastive pretraining, then frozen-encoder fine-tuning.

Stage 1 shuffles the training crosslines each epoch (seeded), builds two
independently augmented views per slice, embeds them through the encoder and
projection head, and labels every row either by the slice's volume position
label (``pair_strategy="volume_labels"``) or by its source index within the
batch (``"simclr"``). The supervised contrastive loss and its analytic
gradient are evaluated in float64 (:mod:`volcon.contrastive`); the gradient
is injected into the autograd graph at the embeddings, so the projection
head's normalization chain rule is handled by backprop, and encoder plus
projection parameters are updated with classical-momentum SGD.

Stage 2 freezes the encoder (parameters and running statistics), discards
the projection head, and trains only the segmentation head with per-pixel
cross-entropy on normalize-only slices, reflect-padded up to the encoder's
output stride and cropped back after upsampling.

Determinism contract: identical (data, configs, seeds) produce identical
loss sequences on CPU, regardless of ``VOLCON_NUM_WORKERS``, because every
augmentation draw comes from a generator derived from
(seed, stage, epoch, slice, view).
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import contrastive, models
from .augmentation import AugmentationPolicy, apply_pipeline, derive_rng
from .errors import ConfigError, DataError, DegenerateBatchError, TrainingError
from .volume_data import CrossLineSlice, VolumeLabelAssignment

logger = logging.getLogger(__name__)

PAIR_STRATEGIES = ("volume_labels", "simclr")

# Stage tags folded into derived rng streams so the two stages never share draws.
_PRETRAIN_STREAM = 1
_FINETUNE_STREAM = 2


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    learning_rate: float = 0.001
    momentum: float = 0.9

    def __post_init__(self):
        if self.kind != "sgd":
            raise ConfigError(f"only 'sgd' is supported, got {self.kind!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.momentum < 1):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class StageConfig:
    stage: str
    epochs: int
    batch_size: int
    seed: int = 0
    temperature: float = contrastive.DEFAULT_TEMPERATURE  # pretrain only
    num_partitions: int | None = None  # pretrain + volume_labels only
    pair_strategy: str = "volume_labels"  # pretrain only
    views_per_slice: int = 2  # pretrain only
    drop_last: bool = False
    loss_reduction: str = "mean"

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"stage must be 'pretrain' or 'finetune', got {self.stage!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.stage == "pretrain":
            if self.pair_strategy not in PAIR_STRATEGIES:
                raise ConfigError(
                    f"pair_strategy must be one of {PAIR_STRATEGIES}, got {self.pair_strategy!r}"
                )
            if not self.temperature > 0:
                raise ConfigError(f"temperature must be > 0, got {self.temperature}")
            if self.views_per_slice not in (1, 2):
                raise ConfigError(f"views_per_slice must be 1 or 2, got {self.views_per_slice}")
            if self.pair_strategy == "volume_labels" and (
                self.num_partitions is None or self.num_partitions < 1
            ):
                raise ConfigError("volume_labels pretraining needs num_partitions >= 1")
            if self.pair_strategy == "simclr" and self.views_per_slice != 2:
                raise ConfigError("simclr requires two views per slice")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError(f"loss_reduction must be 'mean' or 'sum', got {self.loss_reduction}")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    wall_time_s: float
    anchors_skipped: int = 0

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "mean_loss": self.mean_loss,
            "wall_time_s": self.wall_time_s,
            "anchors_skipped": self.anchors_skipped,
        }


@dataclass
class TrainLog:
    stage: str
    records: list[EpochRecord] = field(default_factory=list)
    checkpoint_path: str | None = None

    def append(self, record: EpochRecord):
        if self.records and record.epoch != self.records[-1].epoch + 1:
            raise ConfigError("epoch records must be appended in order")
        self.records.append(record)

    def loss_sequence(self) -> list[float]:
        return [r.mean_loss for r in self.records]

    def write_jsonl(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for record in self.records:
                fh.write(json.dumps(record.to_json()) + "\n")
        return path

    @classmethod
    def read_jsonl(cls, path, stage: str = "unknown") -> "TrainLog":
        log = cls(stage=stage)
        for line in Path(path).read_text().splitlines():
            if line.strip():
                log.append(EpochRecord(**json.loads(line)))
        return log


def num_workers() -> int:
    """Data-loading worker count from VOLCON_NUM_WORKERS (default serial)."""
    raw = os.environ.get("VOLCON_NUM_WORKERS", "1")
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"VOLCON_NUM_WORKERS must be an integer, got {raw!r}") from exc
    return max(1, value)


def _map_maybe_parallel(fn, items):
    workers = num_workers()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def build_optimizer(cfg: OptimizerConfig, parameters) -> torch.optim.Optimizer:
    """Classical momentum SGD: v <- mu v + g; p <- p - lr v."""
    params = [p for p in parameters if p.requires_grad]
    if not params:
        raise ConfigError("optimizer received no trainable parameters")
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum)


def _epoch_batches(
    num_items: int, batch_size: int, drop_last: bool, rng, min_batch: int = 1
) -> list[np.ndarray]:
    order = rng.permutation(num_items)
    batches = [order[i : i + batch_size] for i in range(0, num_items, batch_size)]
    if drop_last and batches and len(batches[-1]) < batch_size:
        batches.pop()
    # A single-view contrastive batch needs at least two slices; everything
    # else keeps partial remainders so each epoch covers every slice.
    if batches and len(batches[-1]) < min_batch:
        batches.pop()
    return batches


def pretrain_contrastive(
    slices: list[CrossLineSlice],
    stage_cfg: StageConfig,
    optimizer_cfg: OptimizerConfig,
    encoder_spec: models.EncoderSpec,
    projection_spec: models.ProjectionHeadSpec,
    policy: AugmentationPolicy,
    assignment: VolumeLabelAssignment | None = None,
) -> tuple[models.ModelCheckpoint, TrainLog]:
    """Stage 1: contrastive pretraining of encoder + projection head."""
    if stage_cfg.stage != "pretrain":
        raise ConfigError(f"expected a pretrain StageConfig, got stage {stage_cfg.stage!r}")
    if policy.mode != "contrastive":
        raise ConfigError("pretraining needs a contrastive-mode augmentation policy")
    if not slices:
        raise DataError("no training slices provided")

    if stage_cfg.pair_strategy == "volume_labels":
        if assignment is None:
            raise ConfigError("volume_labels pretraining needs a VolumeLabelAssignment")
        if assignment.num_slices != len(slices):
            raise ConfigError(
                f"assignment covers {assignment.num_slices} slices but "
                f"{len(slices)} were provided"
            )
        if assignment.num_partitions != stage_cfg.num_partitions:
            raise ConfigError(
                f"assignment has N={assignment.num_partitions} but config asks "
                f"N={stage_cfg.num_partitions}"
            )
    elif assignment is not None or stage_cfg.num_partitions is not None:
        logger.warning("pair_strategy=simclr ignores volume labels and num_partitions")

    torch.manual_seed(stage_cfg.seed)
    encoder = models.build_encoder(encoder_spec, seed=stage_cfg.seed)
    projection = models.build_projection_head(projection_spec, seed=stage_cfg.seed + 1)
    encoder.train()
    projection.train()
    optimizer = build_optimizer(
        optimizer_cfg, list(encoder.parameters()) + list(projection.parameters())
    )

    views = stage_cfg.views_per_slice
    log = TrainLog(stage="pretrain")
    for epoch in range(1, stage_cfg.epochs + 1):
        start = time.monotonic()
        epoch_rng = derive_rng(stage_cfg.seed, _PRETRAIN_STREAM, epoch)
        batches = _epoch_batches(
            len(slices),
            stage_cfg.batch_size,
            stage_cfg.drop_last,
            epoch_rng,
            min_batch=2 if views == 1 else 1,
        )
        if not batches:
            raise TrainingError(
                f"epoch {epoch}: no usable batches from {len(slices)} slices "
                f"at batch_size={stage_cfg.batch_size} (drop_last={stage_cfg.drop_last})"
            )
        losses = []
        skipped_anchors = 0
        degenerate_batches = 0
        for batch_indices in batches:
            def augment_one(job):
                slice_idx, view_idx = job
                rng = derive_rng(
                    stage_cfg.seed, _PRETRAIN_STREAM, epoch, int(slice_idx), view_idx
                )
                return apply_pipeline(slices[slice_idx].image, policy, rng)

            jobs = [(int(i), v) for i in batch_indices for v in range(views)]
            images = _map_maybe_parallel(augment_one, jobs)
            x = torch.from_numpy(np.stack(images)[:, None, :, :].astype(np.float32))
            if encoder_spec.input_channels > 1:
                x = x.repeat(1, encoder_spec.input_channels, 1, 1)

            if stage_cfg.pair_strategy == "volume_labels":
                labels = np.repeat(
                    [assignment.label_of(int(i)) for i in batch_indices], views
                )
            else:
                labels = np.repeat(np.arange(len(batch_indices)), views)

            _, pooled = models.encode(encoder, x)
            z = models.project(projection, pooled)

            embedding_batch = contrastive.EmbeddingBatch(
                z.detach().numpy().astype(np.float64), labels, stage_cfg.temperature
            )
            try:
                result, grad = contrastive.supcon_loss_and_gradient(
                    embedding_batch, reduction=stage_cfg.loss_reduction
                )
            except DegenerateBatchError:
                degenerate_batches += 1
                continue

            optimizer.zero_grad()
            z.backward(torch.from_numpy(grad.astype(np.float32)))
            optimizer.step()
            losses.append(result.value)
            skipped_anchors += result.num_anchors_skipped

        if not losses:
            raise TrainingError(
                f"epoch {epoch}: all {degenerate_batches} batches were degenerate "
                "(no positive pairs); use two views per slice, a larger batch size, "
                "or fewer partitions"
            )
        log.append(
            EpochRecord(
                epoch=epoch,
                mean_loss=float(np.mean(losses)),
                wall_time_s=time.monotonic() - start,
                anchors_skipped=skipped_anchors,
            )
        )
        logger.info(
            "pretrain epoch %d/%d: mean loss %.6f (%d anchors skipped)",
            epoch,
            stage_cfg.epochs,
            log.records[-1].mean_loss,
            skipped_anchors,
        )

    params = {}
    params.update(models.state_dict_to_arrays(encoder, "encoder"))
    params.update(models.state_dict_to_arrays(projection, "projection"))
    checkpoint = models.ModelCheckpoint(
        stage="pretrain",
        epoch=stage_cfg.epochs,
        seed=stage_cfg.seed,
        metrics={
            "final_mean_loss": log.records[-1].mean_loss,
            "pair_strategy": stage_cfg.pair_strategy,
            "num_partitions": stage_cfg.num_partitions,
        },
        encoder_spec=encoder_spec,
        projection_spec=projection_spec,
        params=params,
    )
    return checkpoint, log


def initialize_checkpoint(
    encoder_spec: models.EncoderSpec,
    projection_spec: models.ProjectionHeadSpec,
    seed: int = 0,
) -> models.ModelCheckpoint:
    """Random-initialization baseline: a zero-epoch pretrain checkpoint."""
    encoder = models.build_encoder(encoder_spec, seed=seed)
    projection = models.build_projection_head(projection_spec, seed=seed + 1)
    params = {}
    params.update(models.state_dict_to_arrays(encoder, "encoder"))
    params.update(models.state_dict_to_arrays(projection, "projection"))
    return models.ModelCheckpoint(
        stage="pretrain",
        epoch=0,
        seed=seed,
        metrics={"pair_strategy": "random_init"},
        encoder_spec=encoder_spec,
        projection_spec=projection_spec,
        params=params,
    )


def pixel_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over all pixels of -log softmax(logits)[target].

    logits: (B, C, H, W) float tensor; targets: (B, H, W) integer tensor.
    """
    if logits.ndim != 4:
        raise DataError(f"logits must be (B, C, H, W), got {tuple(logits.shape)}")
    if targets.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
        raise DataError(
            f"targets shape {tuple(targets.shape)} does not match logits "
            f"{tuple(logits.shape)}"
        )
    if targets.dtype.is_floating_point:
        raise DataError(f"targets must be an integer tensor, got {targets.dtype}")
    num_classes = logits.shape[1]
    if int(targets.min()) < 0 or int(targets.max()) >= num_classes:
        raise DataError(
            f"targets must lie in [0, {num_classes}), got range "
            f"[{int(targets.min())}, {int(targets.max())}]"
        )
    log_probs = F.log_softmax(logits, dim=1)
    picked = log_probs.gather(1, targets.long().unsqueeze(1)).squeeze(1)
    return -picked.mean()


def finetune_segmentation(
    slices: list[CrossLineSlice],
    pretrained: models.ModelCheckpoint,
    stage_cfg: StageConfig,
    optimizer_cfg: OptimizerConfig,
    head_spec: models.SegmentationHeadSpec,
    policy: AugmentationPolicy,
) -> tuple[models.ModelCheckpoint, TrainLog]:
    """Stage 2: train the segmentation head on a frozen pretrained encoder."""
    if stage_cfg.stage != "finetune":
        raise ConfigError(f"expected a finetune StageConfig, got stage {stage_cfg.stage!r}")
    if pretrained.stage != "pretrain":
        raise ConfigError(
            f"fine-tuning needs a pretrain checkpoint, got stage {pretrained.stage!r}"
        )
    if policy.mode != "finetune":
        raise ConfigError("fine-tuning needs a finetune-mode augmentation policy")
    if head_spec.in_channels != pretrained.encoder_spec.feature_dim:
        raise ConfigError(
            f"head expects {head_spec.in_channels} input channels but the encoder "
            f"produces {pretrained.encoder_spec.feature_dim}"
        )
    if not slices or any(s.mask is None for s in slices):
        raise DataError("fine-tuning needs slices with segmentation masks")

    encoder_spec = pretrained.encoder_spec
    encoder = models.build_encoder(encoder_spec, seed=stage_cfg.seed)
    models.load_arrays_into(encoder, pretrained.named_state("encoder"))
    models.freeze_encoder(encoder)
    # The projection head is deliberately not rebuilt here: it plays no part
    # in the segmentation graph.
    head = models.build_segmentation_head(head_spec, seed=stage_cfg.seed + 1)
    head.train()
    optimizer = build_optimizer(optimizer_cfg, head.parameters())

    stride = encoder_spec.output_stride
    log = TrainLog(stage="finetune")
    for epoch in range(1, stage_cfg.epochs + 1):
        start = time.monotonic()
        epoch_rng = derive_rng(stage_cfg.seed, _FINETUNE_STREAM, epoch)
        batches = _epoch_batches(
            len(slices), stage_cfg.batch_size, stage_cfg.drop_last, epoch_rng
        )
        if not batches:
            raise TrainingError(
                f"epoch {epoch}: no usable batches from {len(slices)} slices "
                f"at batch_size={stage_cfg.batch_size} (drop_last={stage_cfg.drop_last})"
            )
        losses = []
        for batch_indices in batches:
            images = _map_maybe_parallel(
                lambda i: apply_pipeline(slices[int(i)].image, policy), list(batch_indices)
            )
            masks = np.stack([slices[int(i)].mask for i in batch_indices])
            x = torch.from_numpy(np.stack(images)[:, None, :, :].astype(np.float32))
            if encoder_spec.input_channels > 1:
                x = x.repeat(1, encoder_spec.input_channels, 1, 1)
            targets = torch.from_numpy(masks.astype(np.int64))

            h, w = x.shape[2], x.shape[3]
            padded, _ = models.pad_to_stride(x, stride)
            with torch.no_grad():
                fmap, _ = models.encode(encoder, padded)
            logits = models.segment(head, fmap, (padded.shape[2], padded.shape[3]))
            logits = logits[:, :, :h, :w]

            loss = pixel_cross_entropy(logits, targets)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))

        log.append(
            EpochRecord(
                epoch=epoch,
                mean_loss=float(np.mean(losses)),
                wall_time_s=time.monotonic() - start,
            )
        )
        logger.info(
            "finetune epoch %d/%d: mean loss %.6f",
            epoch,
            stage_cfg.epochs,
            log.records[-1].mean_loss,
        )

    params = {}
    params.update(models.state_dict_to_arrays(encoder, "encoder"))
    params.update(models.state_dict_to_arrays(head, "head"))
    checkpoint = models.ModelCheckpoint(
        stage="finetune",
        epoch=stage_cfg.epochs,
        seed=stage_cfg.seed,
        metrics={
            "final_mean_loss": log.records[-1].mean_loss,
            # Method identity travels with the artifact chain so evaluation
            # reports can label rows without re-reading the pretrain run.
            "pair_strategy": pretrained.metrics.get("pair_strategy"),
            "num_partitions": pretrained.metrics.get("num_partitions"),
        },
        encoder_spec=encoder_spec,
        head_spec=head_spec,
        params=params,
    )
    return checkpoint, log
