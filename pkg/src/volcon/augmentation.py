"""Deterministic image augmentation for the two training stages.

The contrastive stage runs the full pipeline (random resized crop to a
square, horizontal flip, brightness/contrast jitter, normalization); the
fine-tuning and evaluation stages normalize only. Every operation takes an
explicit ``numpy.random.Generator`` and consumes a fixed number of draws, so
two identically seeded pipelines produce identical outputs regardless of the
parameter values. Per-sample generators are derived from (seed, *keys) via
``derive_rng`` so batches stay deterministic under parallel workers.

Crops preserve the input aspect ratio (both sides scale by sqrt of the
sampled area fraction); resizing is bilinear with half-pixel centers, which
makes a full-image crop of a matching square input an exact identity.
Brightness/contrast jitter stands in for color jitter on single-channel
data, where hue and saturation are undefined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .volume_data import CrossLineSlice

MODES = ("contrastive", "finetune", "eval")


@dataclass
class AugmentationPolicy:
    """Parameters for one stage's pipeline; ``mode`` selects which ops run."""

    crop_size: int = 224
    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_probability: float = 0.5
    jitter_brightness: float = 0.4
    jitter_contrast: float = 0.4
    normalization: tuple[float, float] = (0.0, 1.0)
    mode: str = "contrastive"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.crop_size < 1:
            raise ConfigError(f"crop_size must be >= 1, got {self.crop_size}")
        lo, hi = self.crop_scale
        if not (0 < lo <= hi <= 1):
            raise ConfigError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not (0 <= self.flip_probability <= 1):
            raise ConfigError(f"flip_probability must be in [0, 1], got {self.flip_probability}")
        if self.jitter_brightness < 0 or self.jitter_contrast < 0:
            raise ConfigError("jitter strengths must be >= 0")
        if self.normalization[1] <= 0:
            raise ConfigError(f"normalization std must be > 0, got {self.normalization[1]}")

    def for_mode(self, mode: str) -> "AugmentationPolicy":
        return AugmentationPolicy(
            crop_size=self.crop_size,
            crop_scale=self.crop_scale,
            flip_probability=self.flip_probability,
            jitter_brightness=self.jitter_brightness,
            jitter_contrast=self.jitter_contrast,
            normalization=self.normalization,
            mode=mode,
        )


@dataclass
class ViewPair:
    """Two independently augmented views of the same source slice."""

    view_a: np.ndarray
    view_b: np.ndarray
    source_slice_index: int

    def __post_init__(self):
        if self.view_a.shape != self.view_b.shape:
            raise DataError("paired views must share a shape")


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for one (sample, view, epoch, ...) coordinate."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()
    img = np.asarray(img, dtype=np.float64)
    ys = np.clip((np.arange(out_h) + 0.5) * in_h / out_h - 0.5, 0.0, in_h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * in_w / out_w - 0.5, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def random_resized_crop(
    img: np.ndarray,
    out_size: int,
    scale_range: tuple[float, float],
    rng: np.random.Generator,
) -> np.ndarray:
    """Crop a random aspect-preserving sub-rectangle and resize to a square.

    The sub-rectangle covers a uniformly sampled fraction of the image area
    in ``scale_range``; resizing is bilinear.
    """
    img = np.asarray(img)
    if img.ndim != 2 or img.shape[0] < 2 or img.shape[1] < 2:
        raise DataError(f"crop input must be at least 2x2, got shape {img.shape}")
    lo, hi = scale_range
    if not (0 < lo <= hi <= 1):
        raise ConfigError(f"scale_range must satisfy 0 < lo <= hi <= 1, got {scale_range}")
    h, w = img.shape
    area_fraction = rng.uniform(lo, hi)
    side = np.sqrt(area_fraction)
    crop_h = min(h, max(1, int(round(h * side))))
    crop_w = min(w, max(1, int(round(w * side))))
    top = int(rng.integers(0, h - crop_h + 1))
    left = int(rng.integers(0, w - crop_w + 1))
    window = img[top : top + crop_h, left : left + crop_w]
    return _resize_bilinear(window, out_size, out_size)


def horizontal_flip(img: np.ndarray, probability: float, rng: np.random.Generator) -> np.ndarray:
    """Reverse the W axis with the given probability (a draw is always consumed)."""
    if not (0 <= probability <= 1):
        raise ConfigError(f"flip probability must be in [0, 1], got {probability}")
    flip = rng.random() < probability
    return np.asarray(img)[:, ::-1].copy() if flip else np.asarray(img).copy()


def color_jitter(
    img: np.ndarray, brightness: float, contrast: float, rng: np.random.Generator
) -> np.ndarray:
    """Random contrast scaling about the image mean, then a brightness offset.

    The contrast factor is uniform in [1 - contrast, 1 + contrast] (floored
    at 0) and the brightness offset is uniform in [-brightness, +brightness]
    times the image's dynamic range. Strength 0 is an exact identity; two
    draws are consumed regardless.
    """
    if brightness < 0 or contrast < 0:
        raise ConfigError("brightness and contrast must be >= 0")
    img = np.asarray(img, dtype=np.float64)
    factor = rng.uniform(max(0.0, 1.0 - contrast), 1.0 + contrast)
    offset = rng.uniform(-brightness, brightness)
    out = img
    if factor != 1.0:
        mean = out.mean()
        out = mean + (out - mean) * factor
    if offset != 0.0:
        out = out + offset * float(img.max() - img.min())
    return out.copy() if out is img else out


def normalize(img: np.ndarray, mean: float, std: float) -> np.ndarray:
    """(img - mean) / std elementwise."""
    if std <= 0:
        raise ConfigError(f"std must be > 0, got {std}")
    return (np.asarray(img, dtype=np.float64) - mean) / std


def denormalize(img: np.ndarray, mean: float, std: float) -> np.ndarray:
    """Algebraic inverse of ``normalize``."""
    if std <= 0:
        raise ConfigError(f"std must be > 0, got {std}")
    return np.asarray(img, dtype=np.float64) * std + mean


def apply_pipeline(
    img: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Run the policy's pipeline once. Contrastive mode returns a
    (crop_size, crop_size) array; other modes preserve the input shape."""
    mean, std = policy.normalization
    if policy.mode != "contrastive":
        return normalize(img, mean, std)
    if rng is None:
        raise ConfigError("contrastive pipelines need an explicit rng")
    out = random_resized_crop(img, policy.crop_size, policy.crop_scale, rng)
    out = horizontal_flip(out, policy.flip_probability, rng)
    out = color_jitter(out, policy.jitter_brightness, policy.jitter_contrast, rng)
    return normalize(out, mean, std)


def make_view_pair(
    slice_: CrossLineSlice, policy: AugmentationPolicy, rng: np.random.Generator
) -> ViewPair:
    """Two independent draws of the contrastive pipeline on one slice."""
    if policy.mode != "contrastive":
        raise ConfigError(f"view pairs require mode='contrastive', got {policy.mode!r}")
    return ViewPair(
        view_a=apply_pipeline(slice_.image, policy, rng),
        view_b=apply_pipeline(slice_.image, policy, rng),
        source_slice_index=slice_.crossline_index,
    )
