"""Model architecture contracts: encoder, projection head, segmentation head.

Two encoder families share one interface:

* ``resnet18``: the standard 18-layer residual network with a configurable
  input-channel stem and optional stride-to-dilation replacement in the last
  stages, so the final feature map can sit at output stride 8, 16, or 32.
  The pooled feature width is 512.
* ``tiny``: a three-stage convolutional encoder for desk-scale tests.

The projection head is an MLP with one hidden layer whose outputs are
L2-normalized (with an epsilon guard against zero rows); it exists only for
contrastive pretraining and is dropped from the fine-tuning graph. The
segmentation head is an atrous-spatial-pyramid-pooling block (rates 6/12/18,
image-level pooling branch, 1x1 fuse) plus a 1x1 classifier and bilinear
upsampling to the requested spatial size; the ``tiny`` variant replaces the
pyramid with a single 3x3 convolution.

Checkpoints are zip containers holding ``meta.json`` plus one NPY v1.0 entry
per named state array (format ``volcon-checkpoint-v1``); parameter payloads
round-trip byte-identically.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, DataError, FormatError, MissingArtifactError

CHECKPOINT_FORMAT = "volcon-checkpoint-v1"

RESNET18_FEATURE_DIM = 512
TINY_FEATURE_DIM = 64

# Row norms below this trip the zero-vector guard in the projection head.
ZERO_NORM_GUARD = 1e-12


@dataclass
class EncoderSpec:
    family: str = "resnet18"
    input_channels: int = 1
    feature_dim: int | None = None  # None resolves to the family default
    output_stride: int = 16

    def __post_init__(self):
        if self.family not in ("resnet18", "tiny"):
            raise ConfigError(f"unknown encoder family {self.family!r}")
        if self.feature_dim is None:
            self.feature_dim = (
                RESNET18_FEATURE_DIM if self.family == "resnet18" else TINY_FEATURE_DIM
            )
        if self.family == "resnet18" and self.feature_dim != RESNET18_FEATURE_DIM:
            raise ConfigError(
                f"resnet18 feature_dim is fixed at {RESNET18_FEATURE_DIM}, got {self.feature_dim}"
            )
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.output_stride not in (8, 16, 32):
            raise ConfigError(f"output_stride must be 8, 16 or 32, got {self.output_stride}")
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")


@dataclass
class ProjectionHeadSpec:
    in_dim: int = RESNET18_FEATURE_DIM
    hidden_dim: int = RESNET18_FEATURE_DIM
    out_dim: int = 128

    def __post_init__(self):
        if min(self.in_dim, self.hidden_dim, self.out_dim) < 1:
            raise ConfigError("projection head dims must all be >= 1")


@dataclass
class SegmentationHeadSpec:
    in_channels: int
    num_classes: int
    atrous_rates: tuple[int, ...] = (6, 12, 18)
    head_channels: int = 128
    variant: str = "aspp"
    upsample_mode: str = "bilinear"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.variant not in ("aspp", "tiny"):
            raise ConfigError(f"unknown head variant {self.variant!r}")
        if self.upsample_mode != "bilinear":
            raise ConfigError("only bilinear upsampling is supported")
        self.atrous_rates = tuple(int(r) for r in self.atrous_rates)


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with a residual connection; supports dilation."""

    def __init__(self, in_ch, out_ch, stride=1, dilation=1):
        super().__init__()
        self.conv1 = nn.Conv2d(
            in_ch, out_ch, 3, stride=stride, padding=dilation, dilation=dilation, bias=False
        )
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(
            out_ch, out_ch, 3, padding=dilation, dilation=dilation, bias=False
        )
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity, inplace=True)


class ResNet18Encoder(nn.Module):
    """18-layer residual encoder; strides become dilations below stride 32."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.conv1 = nn.Conv2d(spec.input_channels, 64, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)

        # Stage strides for output stride 32 are (1, 2, 2, 2); replacing a
        # stride with dilation keeps the map size and doubles the dilation
        # for that stage and all later ones.
        stage_channels = (64, 128, 256, 512)
        strides = [1, 2, 2, 2]
        dilations = [1, 1, 1, 1]
        dilation = 1
        replace_from = {32: 4, 16: 3, 8: 2}[spec.output_stride]
        for stage in range(replace_from, 4):
            dilation *= strides[stage]
            strides[stage] = 1
            dilations[stage] = dilation

        in_ch = 64
        stages = []
        for stage in range(4):
            out_ch = stage_channels[stage]
            blocks = [BasicBlock(in_ch, out_ch, strides[stage], dilations[stage])]
            blocks.append(BasicBlock(out_ch, out_ch, 1, dilations[stage]))
            stages.append(nn.Sequential(*blocks))
            in_ch = out_ch
        self.layer1, self.layer2, self.layer3, self.layer4 = stages
        _init_conv_bn(self)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)), inplace=True)
        x = self.maxpool(x)
        x = self.layer1(x)
        x = self.layer2(x)
        x = self.layer3(x)
        return self.layer4(x)


class TinyEncoder(nn.Module):
    """Small strided conv stack for desk-scale runs; same I/O contract."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        num_downsamples = {8: 3, 16: 4, 32: 5}[spec.output_stride]
        widths = [16, 32, spec.feature_dim, spec.feature_dim, spec.feature_dim]
        layers = []
        in_ch = spec.input_channels
        for stage in range(num_downsamples):
            out_ch = widths[stage]
            layers += [
                nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
            ]
            in_ch = out_ch
        layers += [
            nn.Conv2d(in_ch, spec.feature_dim, 3, padding=1, bias=False),
            nn.BatchNorm2d(spec.feature_dim),
            nn.ReLU(inplace=True),
        ]
        self.body = nn.Sequential(*layers)
        _init_conv_bn(self)

    def forward(self, x):
        return self.body(x)


class ProjectionHead(nn.Module):
    """One-hidden-layer MLP whose output rows are L2-normalized."""

    def __init__(self, spec: ProjectionHeadSpec):
        super().__init__()
        self.spec = spec
        self.net = nn.Sequential(
            nn.Linear(spec.in_dim, spec.hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(spec.hidden_dim, spec.out_dim),
        )
        # Counts rows whose pre-normalization norm fell below the guard.
        self.zero_norm_events = 0

    def forward(self, pooled):
        raw = self.net(pooled)
        norms = raw.norm(dim=1, keepdim=True)
        tiny = norms < ZERO_NORM_GUARD
        if bool(tiny.any()):
            self.zero_norm_events += int(tiny.sum())
            norms = norms + tiny.to(norms.dtype) * ZERO_NORM_GUARD
        return raw / norms


class AsppSegmentationHead(nn.Module):
    """ASPP pyramid + 1x1 fuse + classifier; logits upsampled by the caller."""

    def __init__(self, spec: SegmentationHeadSpec):
        super().__init__()
        self.spec = spec
        ch = spec.head_channels
        self.branches = nn.ModuleList(
            [
                nn.Sequential(
                    nn.Conv2d(spec.in_channels, ch, 1, bias=False),
                    nn.BatchNorm2d(ch),
                    nn.ReLU(inplace=True),
                )
            ]
        )
        for rate in spec.atrous_rates:
            self.branches.append(
                nn.Sequential(
                    nn.Conv2d(
                        spec.in_channels, ch, 3, padding=rate, dilation=rate, bias=False
                    ),
                    nn.BatchNorm2d(ch),
                    nn.ReLU(inplace=True),
                )
            )
        self.image_pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(spec.in_channels, ch, 1, bias=False),
            nn.BatchNorm2d(ch),
            nn.ReLU(inplace=True),
        )
        self.fuse = nn.Sequential(
            nn.Conv2d(ch * (len(self.branches) + 1), ch, 1, bias=False),
            nn.BatchNorm2d(ch),
            nn.ReLU(inplace=True),
        )
        self.classifier = nn.Conv2d(ch, spec.num_classes, 1)
        _init_conv_bn(self)

    def forward(self, fmap):
        outs = [branch(fmap) for branch in self.branches]
        pooled = self.image_pool(fmap)
        outs.append(F.interpolate(pooled, size=fmap.shape[2:], mode="bilinear", align_corners=False))
        fused = self.fuse(torch.cat(outs, dim=1))
        return self.classifier(fused)


class TinySegmentationHead(nn.Module):
    """Single 3x3 conv + classifier for the desk-scale variant."""

    def __init__(self, spec: SegmentationHeadSpec):
        super().__init__()
        self.spec = spec
        ch = spec.head_channels
        self.body = nn.Sequential(
            nn.Conv2d(spec.in_channels, ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(ch),
            nn.ReLU(inplace=True),
        )
        self.classifier = nn.Conv2d(ch, spec.num_classes, 1)
        _init_conv_bn(self)

    def forward(self, fmap):
        return self.classifier(self.body(fmap))


def _init_conv_bn(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_encoder(spec: EncoderSpec, seed: int = 0) -> nn.Module:
    torch.manual_seed(seed)
    if spec.family == "resnet18":
        return ResNet18Encoder(spec)
    return TinyEncoder(spec)


def build_projection_head(spec: ProjectionHeadSpec, seed: int = 0) -> ProjectionHead:
    torch.manual_seed(seed)
    return ProjectionHead(spec)


def build_segmentation_head(spec: SegmentationHeadSpec, seed: int = 0) -> nn.Module:
    torch.manual_seed(seed)
    if spec.variant == "aspp":
        return AsppSegmentationHead(spec)
    return TinySegmentationHead(spec)


def encode(encoder: nn.Module, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Feature map (B, C, h, w) and its global average pool (B, C).

    ``images`` is (B, channels, H, W); H and W must each cover at least one
    output-stride cell.
    """
    spec = encoder.spec
    if images.ndim != 4:
        raise DataError(f"image batch must be 4D (B, C, H, W), got {tuple(images.shape)}")
    if images.shape[1] != spec.input_channels:
        raise ConfigError(
            f"encoder expects {spec.input_channels} input channels, got {images.shape[1]}"
        )
    if min(images.shape[2], images.shape[3]) < spec.output_stride:
        raise ConfigError(
            f"spatial dims {tuple(images.shape[2:])} too small for output stride "
            f"{spec.output_stride}"
        )
    fmap = encoder(images)
    pooled = fmap.mean(dim=(2, 3))
    return fmap, pooled


def project(head: ProjectionHead, pooled: torch.Tensor) -> torch.Tensor:
    """Unit-norm (B, out_dim) embeddings from pooled encoder features."""
    if pooled.ndim != 2 or pooled.shape[1] != head.spec.in_dim:
        raise ConfigError(
            f"projection head expects width {head.spec.in_dim}, got {tuple(pooled.shape)}"
        )
    return head(pooled)


def segment(head: nn.Module, fmap: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
    """Per-pixel class logits (B, num_classes, H, W) at the target size.

    Softmax is applied downstream (by the loss or by argmax prediction).
    """
    if fmap.ndim != 4 or fmap.shape[1] != head.spec.in_channels:
        raise ConfigError(
            f"segmentation head expects {head.spec.in_channels} channels, "
            f"got {tuple(fmap.shape)}"
        )
    logits = head(fmap)
    return F.interpolate(logits, size=tuple(target_hw), mode="bilinear", align_corners=False)


def freeze_encoder(encoder: nn.Module) -> nn.Module:
    """Exclude the encoder from optimization: no grads, eval-mode statistics."""
    for p in encoder.parameters():
        p.requires_grad_(False)
    encoder.eval()
    return encoder


def pad_to_stride(images: torch.Tensor, stride: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad H and W up to multiples of ``stride``; returns the padding."""
    h, w = images.shape[2], images.shape[3]
    pad_h = (-h) % stride
    pad_w = (-w) % stride
    if pad_h == 0 and pad_w == 0:
        return images, (0, 0)
    return F.pad(images, (0, pad_w, 0, pad_h), mode="reflect"), (pad_h, pad_w)


@dataclass
class ModelCheckpoint:
    """Named state arrays plus the specs and metadata needed to rebuild them."""

    stage: str
    epoch: int
    seed: int
    metrics: dict
    encoder_spec: EncoderSpec
    projection_spec: ProjectionHeadSpec | None = None
    head_spec: SegmentationHeadSpec | None = None
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"stage must be 'pretrain' or 'finetune', got {self.stage!r}")

    def encoder_state(self) -> dict[str, np.ndarray]:
        prefix = "encoder."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def named_state(self, prefix: str) -> dict[str, np.ndarray]:
        prefix = prefix.rstrip(".") + "."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}


def state_dict_to_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for name, tensor in module.state_dict().items():
        out[f"{prefix}.{name}"] = tensor.detach().cpu().numpy().copy()
    return out


def load_arrays_into(module: nn.Module, arrays: dict[str, np.ndarray]):
    state = {name: torch.from_numpy(np.asarray(arr)) for name, arr in arrays.items()}
    module.load_state_dict(state)
    return module


def save_checkpoint(ckpt: ModelCheckpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "metrics": ckpt.metrics,
        "encoder_spec": asdict(ckpt.encoder_spec),
        "projection_spec": asdict(ckpt.projection_spec) if ckpt.projection_spec else None,
        "head_spec": asdict(ckpt.head_spec) if ckpt.head_spec else None,
        "param_names": sorted(ckpt.params),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _write_member(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())
        for name in sorted(ckpt.params):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(ckpt.params[name]), version=(1, 0))
            _write_member(zf, f"params/{name}.npy", buf.getvalue())
    return path


def _write_member(zf: zipfile.ZipFile, name: str, payload: bytes):
    # Fixed timestamp keeps checkpoint bytes reproducible across runs.
    info = zipfile.ZipInfo(name, date_time=(2020, 1, 1, 0, 0, 0))
    zf.writestr(info, payload)


def load_checkpoint(path) -> ModelCheckpoint:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    if not zipfile.is_zipfile(path):
        raise FormatError(f"{path}: not a checkpoint container")
    with zipfile.ZipFile(path) as zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except KeyError as exc:
            raise FormatError(f"{path}: missing meta.json") from exc
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(
                f"{path}: unsupported checkpoint format {meta.get('format')!r}"
            )
        params = {}
        for name in meta["param_names"]:
            buf = io.BytesIO(zf.read(f"params/{name}.npy"))
            params[name] = np.lib.format.read_array(buf)
    return ModelCheckpoint(
        stage=meta["stage"],
        epoch=meta["epoch"],
        seed=meta["seed"],
        metrics=meta["metrics"],
        encoder_spec=EncoderSpec(**meta["encoder_spec"]),
        projection_spec=(
            ProjectionHeadSpec(**meta["projection_spec"]) if meta["projection_spec"] else None
        ),
        head_spec=(
            SegmentationHeadSpec(**meta["head_spec"]) if meta["head_spec"] else None
        ),
        params=params,
    )


@dataclass
class SegmentationBundle:
    """A frozen encoder and a segmentation head ready for inference."""

    encoder: nn.Module
    head: nn.Module
    encoder_spec: EncoderSpec
    head_spec: SegmentationHeadSpec


def load_segmentation_bundle(ckpt: ModelCheckpoint) -> SegmentationBundle:
    if ckpt.stage != "finetune":
        raise ConfigError(f"expected a finetune checkpoint, got stage {ckpt.stage!r}")
    if ckpt.head_spec is None:
        raise ConfigError("finetune checkpoint is missing its segmentation head spec")
    encoder = build_encoder(ckpt.encoder_spec)
    load_arrays_into(encoder, ckpt.named_state("encoder"))
    head = build_segmentation_head(ckpt.head_spec)
    load_arrays_into(head, ckpt.named_state("head"))
    freeze_encoder(encoder)
    head.eval()
    return SegmentationBundle(
        encoder=encoder, head=head, encoder_spec=ckpt.encoder_spec, head_spec=ckpt.head_spec
    )
