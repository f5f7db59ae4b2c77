"""Dataset ingestion and deterministic synthetic image generation.

All images are N x C x H x W float32 in [0, 1], each dataset pixel an
integer multiple of 1/255 (generation goes through uint8). Sample order
and splits are pure functions of the configured seed.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, InputSpecError

SOURCES = ("builtin_small_images", "directory_of_images", "synthetic")

BUILTIN_CLASS_NAMES = [
    "red circle",
    "green square",
    "blue triangle",
    "yellow cross",
    "purple ring",
    "orange stripe",
    "cyan checker",
    "white diamond",
    "teal dots",
    "magenta bars",
]


@dataclass
class DatasetSpec:
    source: str = "builtin_small_images"
    n_samples: int = 640
    image_size: int = 32
    channels: int = 3
    num_classes: int = 10
    seed: int = 0
    root: str | None = None  # for directory_of_images

    def __post_init__(self):
        violations = []
        if self.source not in SOURCES:
            violations.append(f"unknown source {self.source!r}")
        if self.n_samples < 1 and self.source != "directory_of_images":
            violations.append("n_samples must be >= 1")
        if self.source == "directory_of_images" and not self.root:
            violations.append("directory_of_images requires a root path")
        if self.source == "builtin_small_images" and self.num_classes > len(
            BUILTIN_CLASS_NAMES
        ):
            violations.append(
                f"builtin set has at most {len(BUILTIN_CLASS_NAMES)} classes"
            )
        if violations:
            raise ConfigError(violations)


@dataclass
class Dataset:
    images: torch.Tensor
    labels: torch.Tensor | None
    class_names: list
    spec: DatasetSpec | None = None

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "Dataset":
        idx = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return Dataset(
            images=self.images[idx],
            labels=self.labels[idx] if self.labels is not None else None,
            class_names=self.class_names,
            spec=self.spec,
        )

    def split(self, train_fraction: float, seed: int = 0):
        """Deterministic shuffled split; sizes are exact floor/remainder."""
        n = len(self)
        n_train = int(math.floor(train_fraction * n))
        perm = np.random.default_rng(seed).permutation(n)
        return self.subset(perm[:n_train]), self.subset(perm[n_train:])


def _validate_images(images: torch.Tensor) -> None:
    if float(images.min()) < 0.0 or float(images.max()) > 1.0:
        raise InputSpecError("image values outside [0, 1]")
    scaled = images * 255.0
    if float((scaled - scaled.round()).abs().max()) > 1e-4:
        raise InputSpecError("dataset image values are not on the 1/255 grid")


def _shape_mask(class_idx: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cy = cx = (size - 1) / 2.0
    r = size / 4.0
    kind = class_idx % len(BUILTIN_CLASS_NAMES)
    if kind == 0:  # circle
        return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r**2).astype(np.float64)
    if kind == 1:  # square
        return ((np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)).astype(np.float64)
    if kind == 2:  # triangle
        return ((yy - cy + r >= 0) & (np.abs(xx - cx) <= (yy - cy + r) / 2)).astype(
            np.float64
        ) * (yy <= cy + r)
    if kind == 3:  # cross
        return ((np.abs(yy - cy) <= r / 2) | (np.abs(xx - cx) <= r / 2)).astype(
            np.float64
        )
    if kind == 4:  # ring
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return ((d2 <= r**2) & (d2 >= (r / 2) ** 2)).astype(np.float64)
    if kind == 5:  # horizontal stripe
        return (np.abs(yy - cy) <= r / 2).astype(np.float64)
    if kind == 6:  # checkerboard
        return (((yy // 4) + (xx // 4)) % 2).astype(np.float64)
    if kind == 7:  # diamond
        return ((np.abs(yy - cy) + np.abs(xx - cx)) <= r).astype(np.float64)
    if kind == 8:  # dot grid
        return (((yy % 8) < 3) & ((xx % 8) < 3)).astype(np.float64)
    return ((xx // 4) % 2).astype(np.float64)  # vertical bars


def _builtin_palette(num_classes: int) -> tuple:
    rng = np.random.default_rng(20240)
    hues = rng.uniform(0.0, 1.0, size=(num_classes, 3))
    fg = 0.5 + 0.18 * (hues - 0.5) + 0.05
    bg = 0.5 + 0.18 * (hues[::-1] - 0.5) - 0.05
    return fg, bg


# The class label is carried by two signals with very different robustness:
# the color/shape signal above (high amplitude, survives the benchmark's
# perturbation budgets) and the noiseless micro-pattern below (amplitude
# 1/255, discriminative on clean images but fully erasable by an l-inf
# adversary at any benchmark budget). Clean training picks up the
# micro-pattern alongside the noise, so an undefended model is breakable
# at small budgets even though a robust decision rule exists for
# adversarial fine-tuning to recover.
MICRO_PATTERN_AMPLITUDE = 1.0 / 255.0

# Per-pixel Gaussian noise. Besides making the task non-trivial, the noise
# level controls how brittle a clean-trained model ends up: fitting noisy
# pixels leaves high-curvature directions that a first-order adversary
# exploits at small budgets, and that adversarial fine-tuning smooths out.
PIXEL_NOISE_SIGMA = 0.03


def _class_micro_pattern(k: int, channels: int, size: int) -> np.ndarray:
    rng = np.random.default_rng([20241, k])
    return rng.choice((-1.0, 1.0), size=(channels, size, size))


def _generate_builtin(spec: DatasetSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    fg, bg = _builtin_palette(spec.num_classes)
    size = spec.image_size
    images = np.zeros((spec.n_samples, spec.channels, size, size))
    labels = np.zeros(spec.n_samples, dtype=np.int64)
    for i in range(spec.n_samples):
        k = i % spec.num_classes
        labels[i] = k
        mask = _shape_mask(k, size)
        dy, dx = rng.integers(-3, 4, size=2)
        mask = np.roll(np.roll(mask, dy, axis=0), dx, axis=1)
        img = (
            bg[k][: spec.channels, None, None] * (1.0 - mask)
            + fg[k][: spec.channels, None, None] * mask
        )
        img = img + MICRO_PATTERN_AMPLITUDE * _class_micro_pattern(
            k, spec.channels, size
        )
        img = img + rng.uniform(-0.08, 0.08)  # global brightness jitter
        img = img + rng.normal(0.0, PIXEL_NOISE_SIGMA, size=img.shape)
        images[i] = img
    images = np.clip(images, 0.0, 1.0)
    images = np.round(images * 255.0) / 255.0
    return Dataset(
        images=torch.from_numpy(images).float(),
        labels=torch.from_numpy(labels),
        class_names=BUILTIN_CLASS_NAMES[: spec.num_classes],
        spec=spec,
    )


def _generate_synthetic(spec: DatasetSpec) -> Dataset:
    """Smooth random per-class prototype fields plus per-sample noise."""
    proto_rng = np.random.default_rng([spec.seed, 1])
    size = spec.image_size
    prototypes = []
    for _ in range(spec.num_classes):
        field_ = proto_rng.normal(0.0, 1.0, size=(spec.channels, size, size))
        # crude smoothing: average over a 5x5 neighborhood via rolls
        smooth = np.zeros_like(field_)
        for dy in range(-2, 3):
            for dx in range(-2, 3):
                smooth += np.roll(np.roll(field_, dy, axis=1), dx, axis=2)
        smooth /= 25.0
        smooth = 0.5 + smooth / (2.0 * np.abs(smooth).max())
        prototypes.append(smooth)
    rng = np.random.default_rng([spec.seed, 2])
    images = np.zeros((spec.n_samples, spec.channels, size, size))
    labels = np.zeros(spec.n_samples, dtype=np.int64)
    for i in range(spec.n_samples):
        k = i % spec.num_classes
        labels[i] = k
        images[i] = prototypes[k] + rng.normal(0.0, 0.05, size=prototypes[k].shape)
    images = np.clip(images, 0.0, 1.0)
    images = np.round(images * 255.0) / 255.0
    return Dataset(
        images=torch.from_numpy(images).float(),
        labels=torch.from_numpy(labels),
        class_names=[f"texture {k}" for k in range(spec.num_classes)],
        spec=spec,
    )


def _load_directory(spec: DatasetSpec) -> Dataset:
    from PIL import Image

    root = spec.root
    class_dirs = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not class_dirs:
        raise ConfigError(f"no class subdirectories under {root}")
    images, labels = [], []
    for label, cls in enumerate(class_dirs):
        cls_dir = os.path.join(root, cls)
        for name in sorted(os.listdir(cls_dir)):
            path = os.path.join(cls_dir, name)
            try:
                img = Image.open(path)
                img.load()
            except Exception as exc:
                raise InputSpecError(f"undecodable image {path}: {exc}") from exc
            # The perturbation grid is defined in 1/255 units; only 8-bit
            # inputs are accepted, anything deeper is rejected outright.
            if img.mode not in ("RGB", "L"):
                raise InputSpecError(
                    f"{path}: unsupported bit depth / mode {img.mode!r}"
                )
            if img.mode == "L" and spec.channels == 3:
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float64) / 255.0
            if arr.ndim == 2:
                arr = arr[None, :, :]
            else:
                arr = arr.transpose(2, 0, 1)
            if arr.shape != (spec.channels, spec.image_size, spec.image_size):
                raise InputSpecError(
                    f"{path}: expected {spec.channels}x{spec.image_size}"
                    f"x{spec.image_size}, got {arr.shape}"
                )
            images.append(arr)
            labels.append(label)
    data = torch.from_numpy(np.stack(images)).float()
    return Dataset(
        images=data,
        labels=torch.tensor(labels, dtype=torch.long),
        class_names=class_dirs,
        spec=spec,
    )


def ingest(spec: DatasetSpec) -> Dataset:
    """Build a dataset handle with deterministic ordering and verified range."""
    if spec.source == "builtin_small_images":
        dataset = _generate_builtin(spec)
    elif spec.source == "synthetic":
        dataset = _generate_synthetic(spec)
    else:
        dataset = _load_directory(spec)
    _validate_images(dataset.images)
    if dataset.labels is not None:
        k = len(dataset.class_names)
        if int(dataset.labels.min()) < 0 or int(dataset.labels.max()) >= k:
            raise InputSpecError("label out of range")
    return dataset
