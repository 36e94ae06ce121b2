"""Datasets, normalization statistics and the optional augmentation policy.

Images live in [0, 1] everywhere inside the package; handles keep the raw
8-bit HWC arrays and :func:`to_batch` does the scaling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .seeding import derive_seed

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("NormStats needs 3-vectors")
        if any(not 0.0 <= m <= 1.0 for m in self.mean):
            raise ValueError(f"mean outside [0,1]: {self.mean}")
        if any(not 0.0 < s <= 1.0 for s in self.std):
            raise ValueError(f"std must lie in (0,1]: {self.std}")

    def tensors(self, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean = torch.tensor(self.mean, dtype=like.dtype, device=like.device).view(1, 3, 1, 1)
        std = torch.tensor(self.std, dtype=like.dtype, device=like.device).view(1, 3, 1, 1)
        return mean, std


IMAGENET_STATS = NormStats()
# Coarse-grained classifiers (CIFAR/SVHN-style) normalize with 0.5 everywhere.
HALF_STATS = NormStats((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))


@dataclass(frozen=True)
class AugmentPolicy:
    enabled: bool = False
    crop_scale_range: tuple[float, float] = (0.5, 1.0)
    horizontal_flip_prob: float = 0.5
    jitter_strength: float = 0.2

    def __post_init__(self):
        low, high = self.crop_scale_range
        if not 0.0 < low <= high <= 1.0:
            raise ValueError(f"crop_scale_range must satisfy 0 < low <= high <= 1, got {self.crop_scale_range}")
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise ValueError("horizontal_flip_prob must be in [0,1]")
        if self.jitter_strength < 0:
            raise ValueError("jitter_strength must be non-negative")


@dataclass(frozen=True)
class DatasetSpec:
    """Descriptor accepted by :func:`load_dataset`.

    ``kind`` is ``"folder"`` (``root`` points at ``<root>/<class>/<img>``) or
    one of the built-in synthetic generators in :data:`SYNTHETIC`.
    """

    kind: str
    split: str = "train"
    root: str | None = None
    size: int = 1000
    seed: int = 0
    resolution: tuple[int, int] | None = None
    name: str | None = None


@dataclass(frozen=True)
class DatasetHandle:
    name: str
    split: str
    items: tuple[tuple[np.ndarray, int], ...]
    class_count: int
    resolution: tuple[int, int]
    sources: tuple[str, ...] = field(default=(), compare=False)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.items], dtype=np.int64)


def from_arrays(images: Sequence[np.ndarray], labels: Sequence[int], class_count: int,
                name: str = "arrays", split: str = "train") -> DatasetHandle:
    """Wrap 8-bit HWC RGB arrays as a handle, validating labels and sizes."""
    if len(images) == 0:
        raise DatasetError("no items")
    if len(images) != len(labels):
        raise DatasetError("images and labels differ in length")
    items = []
    shape = None
    for img, label in zip(images, labels):
        img = np.asarray(img)
        if img.ndim != 3 or img.shape[2] != 3:
            raise DatasetError(f"expected HxWx3 image, got shape {img.shape}")
        if shape is None:
            shape = img.shape[:2]
        elif img.shape[:2] != shape:
            raise DatasetError(f"mixed image sizes {shape} and {img.shape[:2]}")
        label = int(label)
        if not 0 <= label < class_count:
            raise DatasetError(f"label {label} outside class_count {class_count}")
        items.append((img.astype(np.uint8, copy=False), label))
    return DatasetHandle(name, split, tuple(items), int(class_count), (int(shape[0]), int(shape[1])))


def _load_folder(spec: DatasetSpec) -> DatasetHandle:
    if spec.root is None:
        raise DatasetError("folder dataset needs a root")
    root = Path(spec.root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    images, labels, sources = [], [], []
    for label, cdir in enumerate(class_dirs):
        for path in sorted(cdir.iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(path) as im:
                    im = im.convert("RGB")
                    if spec.resolution is not None:
                        h, w = spec.resolution
                        im = im.resize((w, h), Image.BILINEAR)
                    images.append(np.asarray(im, dtype=np.uint8))
            except (UnidentifiedImageError, OSError) as exc:
                raise DatasetError(f"cannot decode image {path}: {exc}") from exc
            labels.append(label)
            sources.append(str(path))
    if not images:
        raise DatasetError(f"no items under {root}")
    handle = from_arrays(images, labels, len(class_dirs), spec.name or root.name, spec.split)
    return DatasetHandle(handle.name, handle.split, handle.items, handle.class_count,
                         handle.resolution, tuple(sources))


# --- synthetic domains -------------------------------------------------------

def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return xx + 0.5, yy + 0.5


def _shape_mask(kind: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r2 = u * u + v * v
    cheb = np.maximum(np.abs(u), np.abs(v))
    if kind == 0:  # disk
        return r2 <= 1.0
    if kind == 1:  # square
        return cheb <= 0.8
    if kind == 2:  # upward triangle
        return (v <= 0.8) & (v >= -0.8) & (np.abs(u) <= (v + 0.8) * 0.55)
    if kind == 3:  # ring
        return (r2 <= 1.0) & (r2 >= 0.55 ** 2)
    if kind == 4:  # plus
        return ((np.abs(u) <= 0.28) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.28) & (np.abs(u) <= 1.0))
    if kind == 5:  # horizontal bar
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.3)
    if kind == 6:  # vertical bar
        return (np.abs(v) <= 1.0) & (np.abs(u) <= 0.3)
    if kind == 7:  # diamond
        return np.abs(u) + np.abs(v) <= 1.0
    if kind == 8:  # diagonal cross
        return ((np.abs(u - v) <= 0.4) | (np.abs(u + v) <= 0.4)) & (cheb <= 0.85)
    if kind == 9:  # hollow square
        return (cheb <= 0.9) & (cheb >= 0.55)
    raise ValueError(kind)


def _contrasting_colors(rng: np.random.Generator, min_gap: float = 0.35) -> tuple[np.ndarray, np.ndarray]:
    while True:
        a, b = rng.uniform(0.0, 1.0, 3), rng.uniform(0.0, 1.0, 3)
        if np.abs(a - b).max() >= min_gap:
            return a, b


def make_shapes(n: int, seed: int, resolution: tuple[int, int] = (32, 32)) -> tuple[list[np.ndarray], list[int]]:
    """Colored geometric shapes on a gradient background; 10 classes."""
    rng = np.random.default_rng(seed)
    h, w = resolution
    xx, yy = _grid(h, w)
    labels = rng.permutation(np.arange(n) % 10)
    images = []
    scale = min(h, w)
    for label in labels:
        fg, bg = _contrasting_colors(rng)
        bg2 = np.clip(bg + rng.uniform(-0.25, 0.25, 3), 0, 1)
        angle = rng.uniform(0, 2 * np.pi)
        t = ((xx - w / 2) * np.cos(angle) + (yy - h / 2) * np.sin(angle)) / scale + 0.5
        img = bg[None, None] * (1 - t[..., None]) + bg2[None, None] * t[..., None]
        size = rng.uniform(0.22, 0.38) * scale
        cx = w / 2 + rng.uniform(-0.15, 0.15) * w
        cy = h / 2 + rng.uniform(-0.15, 0.15) * h
        mask = _shape_mask(int(label), (xx - cx) / size, (yy - cy) / size)
        img[mask] = fg
        img += rng.normal(0.0, 0.03, img.shape)
        images.append(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))
    return images, [int(v) for v in labels]


_SEGMENTS = {
    0: "abcdef", 1: "bc", 2: "abdeg", 3: "abcdg", 4: "bcfg",
    5: "acdfg", 6: "acdefg", 7: "abc", 8: "abcdefg", 9: "abcdfg",
}


def _segment_mask(seg: str, u: np.ndarray, v: np.ndarray, t: float) -> np.ndarray:
    inside_x = (u >= 0) & (u <= 1)
    if seg == "a":
        return inside_x & (v >= 0) & (v <= t)
    if seg == "d":
        return inside_x & (v >= 1 - t) & (v <= 1)
    if seg == "g":
        return inside_x & (np.abs(v - 0.5) <= t / 2)
    right = (u >= 1 - t) & (u <= 1)
    left = (u >= 0) & (u <= t)
    upper = (v >= 0) & (v <= 0.5)
    lower = (v >= 0.5) & (v <= 1)
    return {"b": right & upper, "c": right & lower, "e": left & lower, "f": left & upper}[seg]


def make_digits(n: int, seed: int, resolution: tuple[int, int] = (32, 32)) -> tuple[list[np.ndarray], list[int]]:
    """Seven-segment digits with slant, stroke and color jitter; 10 classes."""
    rng = np.random.default_rng(seed)
    h, w = resolution
    xx, yy = _grid(h, w)
    labels = rng.permutation(np.arange(n) % 10)
    images = []
    for label in labels:
        fg, bg = _contrasting_colors(rng, 0.45)
        img = np.broadcast_to(bg, (h, w, 3)).copy()
        dh = rng.uniform(0.55, 0.75) * h
        dw = dh * rng.uniform(0.45, 0.65)
        cx = w / 2 + rng.uniform(-0.1, 0.1) * w
        cy = h / 2 + rng.uniform(-0.08, 0.08) * h
        shear = rng.uniform(-0.25, 0.25)
        v = (yy - cy) / dh + 0.5
        u = (xx - cx + shear * (yy - cy)) / dw + 0.5
        t = rng.uniform(0.16, 0.26)
        mask = np.zeros((h, w), dtype=bool)
        for seg in _SEGMENTS[int(label)]:
            mask |= _segment_mask(seg, u, v, t)
        img[mask] = fg
        img += rng.normal(0.0, 0.04, img.shape)
        images.append(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))
    return images, [int(v) for v in labels]


def make_separable(n: int, seed: int, resolution: tuple[int, int] = (32, 32)) -> tuple[list[np.ndarray], list[int]]:
    """Two classes: dark noisy images (0) versus bright noisy images (1)."""
    rng = np.random.default_rng(seed)
    h, w = resolution
    labels = rng.permutation(np.arange(n) % 2)
    images = []
    for label in labels:
        base = 0.3 if label == 0 else 0.7
        img = base + rng.uniform(-0.15, 0.15, (1, 1, 3)) + rng.normal(0, 0.05, (h, w, 3))
        images.append(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))
    return images, [int(v) for v in labels]


SYNTHETIC = {
    "shapes": (make_shapes, 10),
    "digits": (make_digits, 10),
    "separable": (make_separable, 2),
}


def load_dataset(spec: DatasetSpec | dict) -> DatasetHandle:
    if isinstance(spec, dict):
        spec = DatasetSpec(**spec)
    if spec.split not in ("train", "test"):
        raise DatasetError(f"unknown split {spec.split!r}")
    if spec.kind == "folder":
        return _load_folder(spec)
    if spec.kind not in SYNTHETIC:
        raise DatasetError(f"unknown dataset kind {spec.kind!r}")
    if spec.size <= 0:
        raise DatasetError("no items")
    maker, class_count = SYNTHETIC[spec.kind]
    resolution = tuple(spec.resolution or (32, 32))
    images, labels = maker(spec.size, derive_seed(spec.seed, f"{spec.kind}:{spec.split}"), resolution)
    return from_arrays(images, labels, class_count, spec.name or spec.kind, spec.split)


def to_batch(handle: DatasetHandle, indices: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
    n = len(handle)
    for i in indices:
        if not -n <= int(i) < n:
            raise IndexError(f"index {i} out of range for dataset of {n} items")
    arrays = np.stack([handle.items[int(i)][0] for i in indices]) if len(indices) else \
        np.zeros((0, *handle.resolution, 3), dtype=np.uint8)
    batch = torch.from_numpy(arrays).permute(0, 3, 1, 2).to(torch.float32) / 255.0
    labels = torch.tensor([handle.items[int(i)][1] for i in indices], dtype=torch.int64)
    return batch.contiguous(), labels


def iter_batches(handle: DatasetHandle, batch_size: int, rng: np.random.Generator | None = None,
                 drop_last: bool = False) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield batches; shuffled by ``rng`` when given, otherwise in index order."""
    order = rng.permutation(len(handle)) if rng is not None else np.arange(len(handle))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        yield to_batch(handle, idx.tolist())


# --- augmentation ------------------------------------------------------------

LUMA = (0.299, 0.587, 0.114)


def _luma(img: torch.Tensor) -> torch.Tensor:
    return LUMA[0] * img[0:1] + LUMA[1] * img[1:2] + LUMA[2] * img[2:3]


def color_jitter(img: torch.Tensor, brightness: float, contrast: float, saturation: float) -> torch.Tensor:
    """Brightness, contrast and saturation blends on one CHW image, each clamped to [0,1]."""
    img = (img * brightness).clamp(0, 1)
    m = _luma(img).mean()
    img = ((img - m) * contrast + m).clamp(0, 1)
    g = _luma(img)
    return ((img - g) * saturation + g).clamp(0, 1)


def _crop_box(rng: np.random.Generator, h: int, w: int, scale: tuple[float, float]) -> tuple[int, int, int, int]:
    for _ in range(10):
        area = rng.uniform(*scale) * h * w
        ratio = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        cw = int(round(math.sqrt(area * ratio)))
        ch = int(round(math.sqrt(area / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            return int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw
    return 0, 0, h, w


def augment(batch: torch.Tensor, policy: AugmentPolicy, rng: np.random.Generator) -> torch.Tensor:
    """Random resized crop, horizontal flip and color jitter, per image.

    Draw order per image (fixed, so runs are reproducible): crop area
    fraction and log aspect ratio (retried up to 10 times until the box
    fits, else the full image), top and left offsets, the flip uniform, then
    three jitter factors when ``jitter_strength > 0``.
    """
    if not policy.enabled:
        return batch
    n, _, h, w = batch.shape
    out = []
    for i in range(n):
        img = batch[i]
        top, left, ch, cw = _crop_box(rng, h, w, policy.crop_scale_range)
        if (ch, cw) != (h, w):
            crop = img[:, top:top + ch, left:left + cw].unsqueeze(0)
            img = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)[0].clamp(0, 1)
        if rng.random() < policy.horizontal_flip_prob:
            img = img.flip(-1)
        if policy.jitter_strength > 0:
            s = policy.jitter_strength
            b, c, sat = rng.uniform(max(0.0, 1 - s), 1 + s, 3)
            img = color_jitter(img, float(b), float(c), float(sat))
        out.append(img)
    return torch.stack(out)
