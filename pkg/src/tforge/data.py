"""Dataset ingestion, defense-set sampling and PNG rendering.

Pixels are float32 tensors in [0, 1] with shape (N, C, H, W) everywhere in
the package. Labels are int64 tensors.
"""
from __future__ import annotations

import colorsys
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DatasetError, ParameterError, SamplingError, UsageError

log = logging.getLogger(__name__)

DATASETS = ("cifar10", "synthetic")
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]


@dataclass
class ImageBatch:
    pixels: torch.Tensor
    labels: torch.Tensor
    num_classes: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise ParameterError(f"pixels must be (N, C, H, W), got shape {tuple(self.pixels.shape)}")
        if len(self.pixels) < 1:
            raise ParameterError("an ImageBatch needs at least one image")
        if self.labels.ndim != 1 or len(self.labels) != len(self.pixels):
            raise ParameterError(
                f"labels length {tuple(self.labels.shape)} does not match {len(self.pixels)} images"
            )
        if self.pixels.dtype != torch.float32:
            self.pixels = self.pixels.float()
        if self.labels.dtype != torch.int64:
            self.labels = self.labels.long()
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ParameterError(f"pixel values must lie in [0, 1], got [{lo}, {hi}]")

    def __len__(self):
        return len(self.pixels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def subset(self, index) -> "ImageBatch":
        index = torch.as_tensor(index, dtype=torch.long)
        return ImageBatch(self.pixels[index], self.labels[index], self.num_classes)

    def with_pixels(self, pixels: torch.Tensor) -> "ImageBatch":
        return ImageBatch(pixels, self.labels.clone(), self.num_classes, dict(self.meta))

    def exclude_label(self, label: int) -> "ImageBatch | None":
        keep = torch.nonzero(self.labels != label).flatten()
        if len(keep) == 0:
            return None
        return self.subset(keep)


@dataclass
class DefenseSet:
    """Small clean set available to the defender, plus its source indices."""

    samples: ImageBatch
    per_class_count: int
    indices: torch.Tensor

    def __len__(self):
        return len(self.samples)


def resolve_root(root=None) -> Path | None:
    root = root or os.environ.get("TF_DATA_ROOT")
    return Path(root) if root else None


def load_dataset(name: str, root=None, seed: int = 0, **kwargs) -> tuple[ImageBatch, ImageBatch]:
    """Return ``(train, test)`` for ``name``.

    ``cifar10`` reads the binary batches from ``root`` (or ``$TF_DATA_ROOT``),
    accepting either the directory holding the ``.bin`` files or its parent.
    ``synthetic`` takes ``n_train``, ``n_test``, ``num_classes`` and
    ``image_size`` keyword arguments.
    """
    if name == "synthetic":
        return synthetic_blobs(seed=seed, **kwargs)
    if name == "cifar10":
        base = resolve_root(root)
        if base is None:
            raise UsageError("cifar10 needs --data-root or TF_DATA_ROOT")
        if (base / "cifar-10-batches-bin").is_dir():
            base = base / "cifar-10-batches-bin"
        train = _read_cifar(base, CIFAR_TRAIN_FILES)
        test = _read_cifar(base, CIFAR_TEST_FILES)
        return train, test
    raise UsageError(f"unknown dataset {name!r}; expected one of {DATASETS}")


def _read_cifar(base: Path, files) -> ImageBatch:
    pixels, labels = [], []
    for fname in files:
        path = base / fname
        if not path.is_file():
            raise DatasetError(f"missing CIFAR-10 file: {path}")
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD:
            raise DatasetError(f"corrupt CIFAR-10 file (size {raw.size} not a multiple of {CIFAR_RECORD}): {path}")
        records = raw.reshape(-1, CIFAR_RECORD)
        if records[:, 0].max() > 9:
            raise DatasetError(f"corrupt CIFAR-10 file (label byte out of range): {path}")
        labels.append(records[:, 0].astype(np.int64))
        pixels.append(records[:, 1:].reshape(-1, 3, 32, 32))
    x = torch.from_numpy(np.concatenate(pixels)).float().div_(255.0)
    y = torch.from_numpy(np.concatenate(labels))
    return ImageBatch(x, y, num_classes=10)


def write_cifar_bin(batch: ImageBatch, path) -> None:
    """Write ``batch`` in the CIFAR-10 binary record layout (used by tests and fixtures)."""
    x = (batch.pixels * 255).round().to(torch.uint8).reshape(len(batch), -1).numpy()
    rec = np.concatenate([batch.labels.numpy().astype(np.uint8)[:, None], x], axis=1)
    rec.tofile(path)


def _palette(k: int) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb(i / k, 0.85, 0.95) for i in range(k)], dtype=np.float32)


def synthetic_blobs(
    n_train: int = 5000,
    n_test: int = 2000,
    num_classes: int = 10,
    image_size: int = 32,
    seed: int = 0,
    grain: float = 0.015,
) -> tuple[ImageBatch, ImageBatch]:
    """Class-colored, class-oriented Gaussian blobs over textured noise.

    Each class owns a hue and an orientation for an elongated blob; the
    background is smooth noise plus fine grain so that warping and dithering
    leave visible traces. Images are quantized to 8 bits like real photos.
    """
    if n_train < num_classes or n_test < num_classes:
        raise UsageError("synthetic split sizes must be at least num_classes")
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    palette = _palette(num_classes)
    s = image_size

    coarse = rng.uniform(0.0, 1.0, size=(n, 3, 6, 6)).astype(np.float32)
    bg = F.interpolate(torch.from_numpy(coarse), size=(s, s), mode="bicubic", align_corners=True).numpy()
    tone = rng.uniform(0.3, 0.7, size=(n, 1, 1, 1)).astype(np.float32)
    bg = tone + 0.25 * (bg - 0.5) + rng.normal(0.0, grain, size=(n, 3, s, s)).astype(np.float32)

    yy, xx = np.meshgrid(np.arange(s, dtype=np.float32), np.arange(s, dtype=np.float32), indexing="ij")
    cy = rng.uniform(0.3 * s, 0.7 * s, size=n).astype(np.float32)
    cx = rng.uniform(0.3 * s, 0.7 * s, size=n).astype(np.float32)
    major = rng.uniform(0.16 * s, 0.24 * s, size=n).astype(np.float32)
    minor = major * 0.45
    theta = np.pi * labels / num_classes + rng.normal(0.0, 0.08, size=n)
    dy = yy[None] - cy[:, None, None]
    dx = xx[None] - cx[:, None, None]
    c, sn = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
    u = (dx * c + dy * sn) / major[:, None, None]
    v = (-dx * sn + dy * c) / minor[:, None, None]
    alpha = (0.9 * np.exp(-0.5 * (u**2 + v**2)))[:, None].astype(np.float32)
    color = palette[labels] + rng.normal(0.0, 0.04, size=(n, 3)).astype(np.float32)
    img = bg * (1 - alpha) + color[:, :, None, None] * alpha
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0

    x = torch.from_numpy(img.astype(np.float32))
    y = torch.from_numpy(labels.astype(np.int64))
    return (
        ImageBatch(x[:n_train], y[:n_train], num_classes),
        ImageBatch(x[n_train:], y[n_train:], num_classes),
    )


def sample_defense_set(test: ImageBatch, per_class: int, seed: int) -> DefenseSet:
    """Stratified sample of ``per_class`` images from every class of ``test``."""
    if per_class < 1:
        raise UsageError(f"per_class must be >= 1, got {per_class}")
    k = test.num_classes or int(test.labels.max()) + 1
    g = torch.Generator().manual_seed(seed)
    picked = []
    for c in range(k):
        pool = torch.nonzero(test.labels == c).flatten()
        if len(pool) < per_class:
            raise SamplingError(f"class {c} has {len(pool)} samples, fewer than the {per_class} requested")
        picked.append(pool[torch.randperm(len(pool), generator=g)[:per_class]])
    idx = torch.cat(picked)
    return DefenseSet(test.subset(idx), per_class, idx)


def heldout(test: ImageBatch, defense: DefenseSet) -> ImageBatch:
    """The part of ``test`` not used by ``defense``; ASR-Inv is measured here."""
    mask = torch.ones(len(test), dtype=torch.bool)
    mask[defense.indices] = False
    return test.subset(torch.nonzero(mask).flatten())


def to_uint8(pixels: torch.Tensor) -> np.ndarray:
    return (pixels.detach().cpu().clamp(0, 1) * 255.0).round().to(torch.uint8).numpy()


def tile(pixels: torch.Tensor, nrow: int = 8, pad: int = 1) -> torch.Tensor:
    n, c, h, w = pixels.shape
    ncol = min(nrow, n)
    rows = -(-n // ncol)
    canvas = torch.ones(c, rows * (h + pad) + pad, ncol * (w + pad) + pad)
    for i in range(n):
        r, q = divmod(i, ncol)
        top, left = pad + r * (h + pad), pad + q * (w + pad)
        canvas[:, top : top + h, left : left + w] = pixels[i]
    return canvas


def _save(chw: torch.Tensor, path: Path) -> None:
    arr = to_uint8(chw).transpose(1, 2, 0)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def render_png(batch, path, grid: bool = False, nrow: int = 8) -> list[Path]:
    """Write 8-bit PNGs. With ``grid`` a single tiled image goes to ``path``;
    otherwise ``path`` is a directory receiving ``00000.png``, ``00001.png``...
    ``batch`` may be an :class:`ImageBatch` or a raw (N, C, H, W) tensor."""
    pixels = batch.pixels if isinstance(batch, ImageBatch) else batch
    if pixels.ndim == 3:
        pixels = pixels[None]
    if len(pixels) == 0:
        raise UsageError("cannot render an empty batch")
    path = Path(path)
    try:
        if grid:
            path.parent.mkdir(parents=True, exist_ok=True)
            _save(tile(pixels, nrow), path)
            return [path]
        path.mkdir(parents=True, exist_ok=True)
        out = []
        for i, img in enumerate(pixels):
            p = path / f"{i:05d}.png"
            _save(img, p)
            out.append(p)
        return out
    except OSError as exc:
        raise OSError(f"cannot write PNG output at {path}: {exc}") from exc


def read_png(path) -> torch.Tensor:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(arr.transpose(2, 0, 1).copy()).float() / 255.0
