"""Seismic volume ingestion, cross-line slicing, position labels, and splits.

Conventions fixed here and relied on everywhere else:

* A volume is a 3D array indexed (inline, crossline, depth).
* A cross-line slice is the (inline x depth) section at one crossline index,
  presented as an image with H = inline and W = depth.
* Volume position labels partition the crossline axis into contiguous runs
  whose sizes differ by at most one: ``label(i) = floor(i * N / S)``.
* Test splits concatenate volume-1 crosslines then volume-2 crosslines in
  ascending index order and cut that sequence into equal consecutive chunks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

_NPY_MAGIC = b"\x93NUMPY"


@dataclass
class SeismicVolume:
    """3D amplitude array, float32, axes (inline, crossline, depth)."""

    amplitudes: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes)
        if self.amplitudes.ndim != 3:
            raise DataError(f"volume must be 3D, got {self.amplitudes.ndim} dimensions")
        if any(n < 1 for n in self.amplitudes.shape):
            raise DataError(f"all volume dims must be >= 1, got {self.amplitudes.shape}")
        if not np.issubdtype(self.amplitudes.dtype, np.floating):
            self.amplitudes = self.amplitudes.astype(np.float32)
        elif self.amplitudes.dtype != np.float32:
            self.amplitudes = self.amplitudes.astype(np.float32)
        if not np.isfinite(self.amplitudes).all():
            raise DataError("amplitude volume contains NaN or Inf")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.amplitudes.shape)

    @property
    def num_crosslines(self) -> int:
        return self.amplitudes.shape[1]

    @property
    def value_range(self) -> tuple[float, float]:
        return float(self.amplitudes.min()), float(self.amplitudes.max())


@dataclass
class LabelVolume:
    """3D class-index array shaped like its paired amplitude volume."""

    classes: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        self.classes = np.asarray(self.classes)
        if self.classes.ndim != 3:
            raise DataError(f"label volume must be 3D, got {self.classes.ndim} dimensions")
        if np.issubdtype(self.classes.dtype, np.floating):
            if not np.isfinite(self.classes).all():
                raise DataError("label volume contains NaN or Inf")
            if not np.array_equal(self.classes, np.round(self.classes)):
                raise DataError("label volume contains non-integer values")
            self.classes = self.classes.astype(np.int64)
        elif not np.issubdtype(self.classes.dtype, np.integer):
            raise DataError(f"label volume must be integer-typed, got {self.classes.dtype}")
        else:
            self.classes = self.classes.astype(np.int64)
        lo = int(self.classes.min())
        hi = int(self.classes.max())
        if lo < 0:
            raise DataError(f"label values must be non-negative, found {lo}")
        if self.num_classes is None:
            self.num_classes = max(hi + 1, 2)
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if hi >= self.num_classes:
            raise DataError(
                f"label value {hi} out of range for num_classes={self.num_classes}"
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.classes.shape)


@dataclass
class CrossLineSlice:
    """One (inline x depth) image at a fixed crossline index."""

    image: np.ndarray
    crossline_index: int
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.image.ndim != 2:
            raise DataError("slice image must be 2D")
        if self.mask is not None and self.mask.shape != self.image.shape:
            raise DataError(
                f"mask shape {self.mask.shape} differs from image shape {self.image.shape}"
            )


@dataclass
class VolumeLabelAssignment:
    """Per-slice position pseudo-labels from an N-way crossline partition."""

    num_slices: int
    num_partitions: int
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != self.num_slices:
            raise ConfigError("label sequence length must equal num_slices")

    def label_of(self, slice_index: int) -> int:
        return int(self.labels[slice_index])

    def to_json(self) -> dict:
        return {
            "num_slices": self.num_slices,
            "num_partitions": self.num_partitions,
            "labels": [int(v) for v in self.labels],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "VolumeLabelAssignment":
        return cls(
            num_slices=int(payload["num_slices"]),
            num_partitions=int(payload["num_partitions"]),
            labels=np.asarray(payload["labels"], dtype=np.int64),
        )


@dataclass
class SplitSpec:
    """One test split: a list of (volume_id, crossline_index) pairs."""

    split_id: int
    crossline_ids: list[tuple[int, int]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "split_id": self.split_id,
            "crosslines": [[int(v), int(i)] for v, i in self.crossline_ids],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "SplitSpec":
        return cls(
            split_id=int(payload["split_id"]),
            crossline_ids=[(int(v), int(i)) for v, i in payload["crosslines"]],
        )


def _check_npy_header(path: Path):
    with open(path, "rb") as fh:
        prefix = fh.read(8)
    if len(prefix) < 8 or prefix[:6] != _NPY_MAGIC:
        raise FormatError(f"{path}: not an NPY file (bad magic bytes)")
    major, minor = prefix[6], prefix[7]
    if (major, minor) != (1, 0):
        raise FormatError(f"{path}: unsupported NPY version {major}.{minor}, expected 1.0")


def load_volume(path, kind: str):
    """Load a 3D NPY volume as a SeismicVolume or LabelVolume.

    ``kind`` is ``"amplitude"`` or ``"label"``. Amplitude data is cast to
    float32 and must be finite; label data must be integer-valued.
    """
    if kind not in ("amplitude", "label"):
        raise ConfigError(f"kind must be 'amplitude' or 'label', got {kind!r}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"volume file does not exist: {path}")
    _check_npy_header(path)
    try:
        raw = np.load(path, allow_pickle=False)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed NPY payload ({exc})") from exc
    if raw.dtype == object or raw.dtype.kind not in "fiub":
        raise DataError(f"{path}: unsupported dtype {raw.dtype}")
    if kind == "amplitude":
        return SeismicVolume(raw)
    return LabelVolume(raw)


def save_volume(path, array: np.ndarray):
    """Write an array as NPY v1.0 (the on-disk format load_volume expects)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.lib.format.write_array(fh, np.asarray(array), version=(1, 0))
    return path


def extract_crosslines(
    vol: SeismicVolume, labels: LabelVolume | None = None
) -> list[CrossLineSlice]:
    """One CrossLineSlice per crossline index, ascending.

    Slices are read-only views into the loaded volume, so extraction is safe
    to call concurrently on one shared volume.
    """
    if labels is not None and labels.dims != vol.dims:
        raise DataError(
            f"label volume shape {labels.dims} differs from amplitude shape {vol.dims}"
        )
    slices = []
    for k in range(vol.num_crosslines):
        image = vol.amplitudes[:, k, :]
        image.flags.writeable = False
        mask = None
        if labels is not None:
            mask = labels.classes[:, k, :]
            mask.flags.writeable = False
        slices.append(CrossLineSlice(image=image, crossline_index=k, mask=mask))
    return slices


def assign_volume_labels(num_slices: int, num_partitions: int) -> VolumeLabelAssignment:
    """Partition ``num_slices`` crosslines into ``num_partitions`` contiguous runs.

    Slice ``i`` gets label ``floor(i * N / S)``; run sizes differ by at most
    one and reduce to exactly ``S / N`` whenever N divides S.
    """
    if num_partitions < 1 or num_partitions > num_slices:
        raise ConfigError(
            f"num_partitions must satisfy 1 <= N <= num_slices, "
            f"got N={num_partitions}, S={num_slices}"
        )
    labels = (np.arange(num_slices, dtype=np.int64) * num_partitions) // num_slices
    return VolumeLabelAssignment(
        num_slices=num_slices, num_partitions=num_partitions, labels=labels
    )


def build_test_splits(
    test_vol_1_crosslines: int, test_vol_2_crosslines: int, num_splits: int
) -> list[SplitSpec]:
    """Sequentially partition the concatenated test crosslines into equal splits."""
    if num_splits < 1:
        raise ConfigError(f"num_splits must be >= 1, got {num_splits}")
    total = test_vol_1_crosslines + test_vol_2_crosslines
    if total % num_splits != 0:
        raise ConfigError(
            f"total test crosslines ({total}) not divisible by num_splits ({num_splits})"
        )
    combined = [(0, k) for k in range(test_vol_1_crosslines)]
    combined += [(1, k) for k in range(test_vol_2_crosslines)]
    per_split = total // num_splits
    return [
        SplitSpec(split_id=s, crossline_ids=combined[s * per_split : (s + 1) * per_split])
        for s in range(num_splits)
    ]


def write_split_specs(splits: list[SplitSpec], directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for split in splits:
        path = directory / f"split_{split.split_id}.json"
        path.write_text(json.dumps(split.to_json(), indent=2))
        paths.append(path)
    return paths


def compute_normalization_stats(vol: SeismicVolume) -> tuple[float, float]:
    """Scalar mean and population std over all amplitudes (float64 accumulation)."""
    flat = vol.amplitudes.astype(np.float64)
    mean = float(flat.mean())
    std = float(flat.std())
    if std == 0.0:
        raise DataError("volume is constant: zero standard deviation")
    return mean, std


@dataclass
class SyntheticVolumeConfig:
    """Desk-scale layered volume: class bands along depth, dipping with crossline.

    ``dip`` is the downward boundary shift in depth voxels per crossline
    step, so adjacent crosslines differ less than distant ones. Amplitudes
    are per-class base values (evenly spaced in [-1, 1]) plus Gaussian noise.
    """

    num_layers: int
    dims: tuple[int, int, int]  # (inline, crossline, depth)
    dip: float = 0.0
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 2:
            raise ConfigError(f"num_layers must be >= 2, got {self.num_layers}")
        if len(self.dims) != 3 or any(int(n) < 1 for n in self.dims):
            raise ConfigError(f"dims must be three positive integers, got {self.dims}")
        self.dims = tuple(int(n) for n in self.dims)
        if self.num_layers > self.dims[2]:
            raise ConfigError(
                f"num_layers ({self.num_layers}) exceeds depth extent ({self.dims[2]})"
            )
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")


def generate_synthetic_volume(
    cfg: SyntheticVolumeConfig,
) -> tuple[SeismicVolume, LabelVolume]:
    """Deterministically synthesize a layered (amplitude, label) volume pair."""
    inline, crossline, depth = cfg.dims
    rng = np.random.default_rng(cfg.seed)

    d = np.arange(depth, dtype=np.float64)
    x = np.arange(crossline, dtype=np.float64)
    # Effective depth coordinate per (crossline, depth); boundaries shift
    # down by dip voxels per crossline step.
    effective = d[None, :] - cfg.dip * x[:, None]
    bands = np.floor(effective * cfg.num_layers / depth).astype(np.int64)
    bands = np.clip(bands, 0, cfg.num_layers - 1)
    classes = np.broadcast_to(bands[None, :, :], (inline, crossline, depth)).copy()

    base_values = np.linspace(-1.0, 1.0, cfg.num_layers)
    amplitudes = base_values[classes]
    if cfg.noise > 0:
        amplitudes = amplitudes + rng.normal(0.0, cfg.noise, size=classes.shape)
    volume = SeismicVolume(amplitudes.astype(np.float32))
    labels = LabelVolume(classes, num_classes=cfg.num_layers)
    return volume, labels
