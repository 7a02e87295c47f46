"""Procedural two-domain image data with a controllable domain shift."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from dotuda.errors import ConfigError, FormatError
from dotuda.serialize import load_archive, save_archive

SOURCE, TARGET = "source", "target"
_DOMAIN_CODE = {SOURCE: 0, TARGET: 1}

# Every shape is mirror-symmetric about the vertical axis so a horizontal
# flip never changes the class.
SHAPES = ("hbar", "vbar", "ring", "plus", "cross", "square", "disc", "double_hbar")


@dataclass
class DomainShift:
    brightness_offset: float = 0.0
    noise_sigma: float = 0.0
    invert: bool = False
    background_texture_amplitude: float = 0.0

    def is_identity(self) -> bool:
        return (
            self.brightness_offset == 0
            and self.noise_sigma == 0
            and not self.invert
            and self.background_texture_amplitude == 0
        )


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    samples_per_class: int = 50
    image_size: int = 16
    shift: DomainShift = field(
        default_factory=lambda: DomainShift(
            brightness_offset=0.0, noise_sigma=0.15, invert=False, background_texture_amplitude=0.3
        )
    )
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.shift, dict):
            self.shift = DomainShift(**self.shift)
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ConfigError(f"num_classes must be in [1, {len(SHAPES)}], got {self.num_classes}")
        if self.samples_per_class < 1:
            raise ConfigError(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        if self.shift.noise_sigma < 0 or self.shift.background_texture_amplitude < 0:
            raise ConfigError("noise_sigma and background_texture_amplitude must be non-negative")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DomainDataset:
    images: np.ndarray
    labels: np.ndarray
    domain_tag: str
    manifest: dict

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise FormatError(f"images must be n x C x H x W, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise FormatError(f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.manifest.get("spec", {}).get("num_classes", int(self.labels.max()) + 1))


# rendering --------------------------------------------------------------------

def _shape_intensity(kind: str, xx, yy, cx, cy, radius, thickness):
    dx, dy = np.abs(xx - cx), np.abs(yy - cy)
    half = thickness / 2.0
    if kind == "hbar":
        d = np.maximum(dy - half, dx - radius)
    elif kind == "vbar":
        d = np.maximum(dx - half, dy - radius)
    elif kind == "ring":
        d = np.abs(np.hypot(dx, dy) - radius) - half
    elif kind == "plus":
        d = np.minimum(np.maximum(dy - half, dx - radius), np.maximum(dx - half, dy - radius))
    elif kind == "cross":
        along = (dx + dy) / np.sqrt(2.0)
        across = np.abs(dx - dy) / np.sqrt(2.0)
        d = np.maximum(across - half, along - radius)
    elif kind == "square":
        d = np.abs(np.maximum(dx, dy) - radius * 0.8) - half
    elif kind == "disc":
        d = np.hypot(dx, dy) - radius * 0.7
    elif kind == "double_hbar":
        gap = radius * 0.5
        d = np.maximum(np.abs(dy - gap) - half, dx - radius)
    else:
        raise ConfigError(f"unknown shape {kind}")
    # One-pixel linear ramp at the boundary.
    return np.clip(0.5 - d, 0.0, 1.0)


def render_clean(label: int, image_size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one class prototype with random placement, size, stroke and ink."""
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    # Horizontal jitter is symmetric so the shape stays mirror-symmetric in law.
    cx = (s - 1) / 2.0 + rng.uniform(-1.5, 1.5)
    cy = (s - 1) / 2.0 + rng.uniform(-1.5, 1.5)
    radius = s * rng.uniform(0.25, 0.36)
    thickness = rng.uniform(1.2, 2.4)
    ink = rng.uniform(0.7, 1.0)
    return ink * _shape_intensity(SHAPES[label], xx, yy, cx, cy, radius, thickness)


def apply_shift(clean: np.ndarray, shift: DomainShift, rng: np.random.Generator) -> np.ndarray:
    """Texture, then inversion, then brightness, then noise; clipped to [0, 1]."""
    img = clean.copy()
    s = img.shape[-1]
    if shift.background_texture_amplitude:
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
        freq = rng.uniform(0.6, 1.2, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        texture = 0.5 + 0.5 * np.sin(freq[0] * xx + phase[0]) * np.sin(freq[1] * yy + phase[1])
        img = np.maximum(img, shift.background_texture_amplitude * texture)
    if shift.invert:
        img = 1.0 - img
    img = img + shift.brightness_offset
    if shift.noise_sigma:
        img = img + rng.normal(0.0, shift.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _sample_rng(seed: int, domain: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _DOMAIN_CODE[domain], index])


def generate_domain(spec: SyntheticSpec, domain: str) -> DomainDataset:
    shift = DomainShift() if domain == SOURCE else spec.shift
    n = spec.num_classes * spec.samples_per_class
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    images = np.empty((n, 1, spec.image_size, spec.image_size))
    for i, y in enumerate(labels):
        rng = _sample_rng(spec.seed, domain, i)
        clean = render_clean(int(y), spec.image_size, rng)
        images[i, 0] = apply_shift(clean, shift, rng) if not shift.is_identity() else clean
    manifest = {"spec": spec.to_dict(), "domain": domain, "num_samples": n, "image_shape": list(images.shape[1:])}
    return DomainDataset(images=images, labels=labels, domain_tag=domain, manifest=manifest)


def generate_pair(spec: SyntheticSpec) -> tuple[DomainDataset, DomainDataset]:
    """Class-balanced source (no shift) and target (``spec.shift``) datasets."""
    return generate_domain(spec, SOURCE), generate_domain(spec, TARGET)


# persistence --------------------------------------------------------------------

def save_dataset(dataset: DomainDataset, path):
    manifest = dict(dataset.manifest)
    manifest.update(
        domain=dataset.domain_tag, num_samples=len(dataset), image_shape=list(dataset.images.shape[1:])
    )
    save_archive(path, manifest, {"images": dataset.images, "labels": dataset.labels.astype(np.float64)})


def load_dataset(path) -> DomainDataset:
    manifest, tensors = load_archive(path)
    for key in ("images", "labels"):
        if key not in tensors:
            raise FormatError(f"{path}: missing tensor {key!r}")
    images, labels = tensors["images"], tensors["labels"]
    expected = (manifest.get("num_samples"), *manifest.get("image_shape", []))
    if tuple(images.shape) != tuple(expected):
        raise FormatError(f"{path}: manifest declares shape {expected}, payload has {images.shape}")
    if labels.shape != (images.shape[0],) or np.any(labels != np.round(labels)):
        raise FormatError(f"{path}: labels payload inconsistent with images")
    domain = manifest.get("domain")
    if domain not in _DOMAIN_CODE:
        raise FormatError(f"{path}: unknown domain tag {domain!r}")
    return DomainDataset(images=images, labels=labels.astype(np.int64), domain_tag=domain, manifest=manifest)


# iteration ------------------------------------------------------------------------

def erase_box(image_size: int, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Random rectangle covering 5-15% of the image: (top, left, height, width)."""
    area = rng.uniform(0.05, 0.15) * image_size * image_size
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    h = int(np.clip(round(np.sqrt(area * aspect)), 1, image_size))
    w = int(np.clip(round(np.sqrt(area / aspect)), 1, image_size))
    top = int(rng.integers(0, image_size - h + 1))
    left = int(rng.integers(0, image_size - w + 1))
    return top, left, h, w


def augment_image(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Horizontal flip with p=0.5, then random erasing to 0.5 gray with p=0.25."""
    out = image
    if rng.random() < 0.5:
        out = out[..., ::-1]
    if rng.random() < 0.25:
        out = out.copy()
        top, left, h, w = erase_box(image.shape[-1], rng)
        out[..., top : top + h, left : left + w] = 0.5
    return np.ascontiguousarray(out)


def batches(
    dataset: DomainDataset,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    augment: bool = False,
    stream: int = 0,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(indices, images)`` over one epoch; the short tail batch is dropped."""
    n = len(dataset)
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    order = np.random.default_rng([seed, stream, epoch]).permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        idx = order[start : start + batch_size]
        imgs = dataset.images[idx]
        if augment:
            imgs = np.stack(
                [augment_image(dataset.images[i], np.random.default_rng([seed, stream, epoch, int(i), 1])) for i in idx]
            )
        yield idx, imgs
