"""Synthetic patch-classification data and IDX image files.

Every image is a grid of patches.  ``fg_patches`` of them, at random
positions, carry the class template plus noise; the rest are textured noise
that says nothing about the label.  The label is therefore a function of the
foreground patches alone, and a model that finds them can discard most other
tokens without losing accuracy.  Pixel values are quantized to ``k/255`` so
8-bit IDX files round-trip exactly.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Recipe:
    count: int = 4000
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    classes: int = 10
    fg_patches: int = 4
    noise: float = 0.6  # std of the noise added to foreground patches
    background: float = 1.0  # amplitude of background texture around mid-gray
    template_seed: int = 2024  # class templates are shared across splits
    parts: int = 0  # > 0: a class is an unordered pair of distinct part patterns

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        grid = (self.image_size // self.patch_size) ** 2
        if not 1 <= self.fg_patches <= grid:
            raise ValueError(f"fg_patches must lie in [1, {grid}]")
        if self.count <= 0 or self.classes <= 1 or self.channels <= 0:
            raise ValueError("count must be positive and classes at least 2")
        if self.parts:
            if self.parts * (self.parts - 1) // 2 != self.classes:
                raise ValueError(f"{self.parts} parts make {self.parts * (self.parts - 1) // 2} pairs, not {self.classes} classes")
            if self.fg_patches % 2:
                raise ValueError("part-pair classes need an even number of foreground patches")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size


@dataclass
class ToyDataset:
    images: np.ndarray  # (n, H, W, C) in [0, 1]
    labels: np.ndarray  # (n,) int64
    split: str = "train"
    seed: int = 0
    recipe: dict = field(default_factory=dict)
    fg_mask: np.ndarray | None = None  # (n, grid*grid) True on foreground patches

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> ToyDataset:
        idx = np.asarray(idx)
        fg = None if self.fg_mask is None else self.fg_mask[idx]
        return ToyDataset(self.images[idx], self.labels[idx], self.split, self.seed, dict(self.recipe), fg)

    def fraction(self, denominator: int, seed: int = 0) -> ToyDataset:
        """A class-balanced ``1/denominator`` subset."""
        rng = np.random.default_rng(seed)
        keep = []
        for c in np.unique(self.labels):
            idx = np.flatnonzero(self.labels == c)
            keep.extend(rng.choice(idx, size=max(len(idx) // denominator, 1), replace=False))
        return self.subset(np.sort(np.array(keep)))


def class_templates(recipe: Recipe) -> np.ndarray:
    """(classes, P, P, C) templates, or (parts, P, P, C) part patterns."""
    rng = np.random.default_rng(recipe.template_seed)
    p = recipe.patch_size
    count = recipe.parts or recipe.classes
    return rng.uniform(0.0, 1.0, size=(count, p, p, recipe.channels))


def part_pairs(parts: int) -> np.ndarray:
    """Class index -> the two part indices that make it up."""
    return np.array([(a, b) for a in range(parts) for b in range(a + 1, parts)])


def quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def gen_dataset(recipe: Recipe | None = None, seed: int = 0, split: str = "train") -> ToyDataset:
    recipe = recipe or Recipe()
    rng = np.random.default_rng(seed)
    templates = class_templates(recipe)
    g, p, c = recipe.grid, recipe.patch_size, recipe.channels
    n = recipe.count
    labels = rng.permutation(np.arange(n) % recipe.classes)
    bg = 0.5 + 0.5 * recipe.background * rng.uniform(-1.0, 1.0, size=(n, g, g, p, p, c))
    fg = np.zeros((n, g * g), dtype=bool)
    for i in range(n):
        fg[i, rng.choice(g * g, size=recipe.fg_patches, replace=False)] = True
    noise = recipe.noise * rng.normal(size=(n, g, g, p, p, c))
    if recipe.parts:
        # foreground patches alternate between the two parts of the class
        pairs = part_pairs(recipe.parts)[labels]
        rank = np.cumsum(fg, axis=1) - 1
        which = np.where(rank % 2 == 0, pairs[:, :1], pairs[:, 1:])
        pattern = templates[which].reshape(n, g, g, p, p, c)
    else:
        pattern = np.broadcast_to(templates[labels].reshape(n, 1, 1, p, p, c), (n, g, g, p, p, c))
    tiles = np.where(fg.reshape(n, g, g, 1, 1, 1), pattern + noise, bg)
    images = tiles.transpose(0, 1, 3, 2, 4, 5).reshape(n, g * p, g * p, c)
    return ToyDataset(quantize(images), labels.astype(np.int64), split, seed, asdict(recipe), fg)


# --- IDX files ----------------------------------------------------------------

_UBYTE = 0x08


def write_idx(dataset: ToyDataset, images_path, labels_path) -> None:
    """Write 8-bit IDX files; grayscale images use 3 dims, colour images 4."""
    imgs = np.round(np.asarray(dataset.images) * 255.0).astype(np.uint8)
    if imgs.shape[-1] == 1:
        imgs = imgs[..., 0]
    header = struct.pack(">I", (_UBYTE << 8) | imgs.ndim) + struct.pack(f">{imgs.ndim}I", *imgs.shape)
    Path(images_path).write_bytes(header + imgs.tobytes())
    lab = np.asarray(dataset.labels).astype(np.uint8)
    Path(labels_path).write_bytes(struct.pack(">II", (_UBYTE << 8) | 1, len(lab)) + lab.tobytes())


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated at offset {len(raw)}")
    (magic,) = struct.unpack_from(">I", raw, 0)
    dtype, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if magic >> 16 or dtype != _UBYTE or ndim not in (1, 3, 4):
        raise ValueError(f"{path}: bad IDX magic 0x{magic:08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise ValueError(f"{path}: truncated at offset {len(raw)}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) < head + size:
        raise ValueError(f"{path}: truncated at offset {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=head).reshape(dims)


def ingest_idx(images_path, labels_path=None, split: str = "external") -> ToyDataset:
    """Read IDX images (and optional labels) into a dataset scaled to [0, 1]."""
    imgs = _read_idx(images_path)
    if imgs.ndim == 1:
        raise ValueError(f"{images_path}: expected an image file, found a 1-d IDX")
    if imgs.ndim == 3:
        imgs = imgs[..., None]
    images = imgs.astype(np.float64) / 255.0
    if labels_path is None:
        labels = np.zeros(len(images), dtype=np.int64)
    else:
        lab = _read_idx(labels_path)
        if lab.ndim != 1 or len(lab) != len(images):
            raise ValueError(f"{labels_path}: {lab.shape} labels for {len(images)} images")
        labels = lab.astype(np.int64)
    return ToyDataset(images, labels, split, 0, {})
