"""Synthetic multi-class segmentation data (ellipses and rectangles)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DataError


@dataclass
class SynthSpec:
    seed: int = 0
    count: int = 16
    size: int = 64
    num_classes: int = 3
    noise: float = 0.1
    augment: bool = False

    def validate(self) -> None:
        if self.size < 32:
            raise ConfigError(f"size must be at least 32, got {self.size}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.num_classes > self.size // 4:
            raise ConfigError(f"num_classes {self.num_classes} too many for size {self.size} (max {self.size // 4})")
        if not 0.0 <= self.noise <= 0.2:
            raise ConfigError(f"noise must lie in [0, 0.2], got {self.noise}")
        if self.count < 0:
            raise ConfigError(f"count must be non-negative, got {self.count}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SampleBatch:
    images: np.ndarray  # (B, C, H, W) in [0, 1]
    labels: np.ndarray  # (B, H, W) int64

    def __post_init__(self):
        if self.images.ndim != 4 or self.labels.ndim != 3:
            raise DataError(f"expected images (B,C,H,W) and labels (B,H,W), got {self.images.shape}, {self.labels.shape}")
        if self.images.shape[0] != self.labels.shape[0] or self.images.shape[2:] != self.labels.shape[1:]:
            raise DataError(f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, idx) -> "SampleBatch":
        idx = np.atleast_1d(np.arange(len(self))[idx])
        return SampleBatch(self.images[idx], self.labels[idx])

    def check_labels(self, num_classes: int) -> None:
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= num_classes):
            raise DataError(f"labels outside [0, {num_classes})")


def class_intensities(num_classes: int) -> np.ndarray:
    return np.linspace(0.1, 0.9, num_classes, dtype=np.float32)


def _shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = rng.uniform(0.2, 0.8, 2) * size
    ay, ax = rng.uniform(0.08, 0.25, 2) * size
    theta = rng.uniform(0.0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    if rng.random() < 0.5:
        return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
    return (np.abs(u) <= ax) & (np.abs(v) <= ay)


def render_sample(spec: SynthSpec, index: int):
    """One (image (1, H, W), label (H, W)) pair; each sample has its own derived seed."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(index,)))
    base = class_intensities(spec.num_classes)
    while True:
        label = np.zeros((spec.size, spec.size), dtype=np.int64)
        for k in range(1, spec.num_classes):
            label[_shape_mask(rng, spec.size)] = k
        counts = np.bincount(label.ravel(), minlength=spec.num_classes)
        if (counts[1:] > 0).all():
            break
    image = base[label]
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, image.shape).astype(np.float32)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
    if spec.augment:
        image, label = random_augment(image, label, rng)
    return image, label


def synth_generate(spec: SynthSpec, start: int = 0) -> SampleBatch:
    """Deterministic dataset of ``spec.count`` samples with indices from ``start``.

    Sample ``i`` depends only on ``(spec, i)``, so disjoint index ranges of the
    same seed give disjoint train and held-out splits.
    """
    spec.validate()
    pairs = [render_sample(spec, i) for i in range(start, start + spec.count)]
    images = np.stack([p[0] for p in pairs]) if pairs else np.zeros((0, 1, spec.size, spec.size), np.float32)
    labels = np.stack([p[1] for p in pairs]) if pairs else np.zeros((0, spec.size, spec.size), np.int64)
    return SampleBatch(images, labels)


def flip(image: np.ndarray, label: np.ndarray, axis: str = "horizontal"):
    """Mirror image (C, H, W) and label (H, W) together."""
    if axis == "horizontal":
        return image[..., ::-1].copy(), label[..., ::-1].copy()
    if axis == "vertical":
        return image[..., ::-1, :].copy(), label[..., ::-1, :].copy()
    raise ConfigError(f"flip axis must be 'horizontal' or 'vertical', got {axis!r}")


def rotate90(image: np.ndarray, label: np.ndarray, k: int = 1):
    return np.rot90(image, k, axes=(-2, -1)).copy(), np.rot90(label, k, axes=(-2, -1)).copy()


def random_augment(image, label, rng: np.random.Generator):
    """Random horizontal flip and random multiple-of-90-degree rotation."""
    if rng.random() < 0.5:
        image, label = flip(image, label)
    return rotate90(image, label, int(rng.integers(4)))


def augment_batch(batch: SampleBatch, rng: np.random.Generator) -> SampleBatch:
    pairs = [random_augment(i, l, rng) for i, l in zip(batch.images, batch.labels)]
    return SampleBatch(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))
