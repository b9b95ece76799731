"""Labeled image datasets: a procedural 10-class benchmark and an image-folder loader."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from splitcomp.errors import EmptyDataset, ShapeError

SYNTH_CLASSES = (
    "disk-h", "disk-v", "square-h", "square-v", "triangle-h",
    "triangle-v", "ring-h", "ring-v", "cross-h", "cross-v",
)


@dataclass(eq=False)
class Dataset:
    x: np.ndarray  # (N, C, H, W) float32
    y: np.ndarray  # (N,) int64
    classes: tuple = ()

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 4 or self.y.shape != (self.x.shape[0],):
            raise ShapeError(f"dataset arrays disagree: x {self.x.shape}, y {self.y.shape}")

    def __len__(self):
        return self.x.shape[0]

    @property
    def input_shape(self):
        return tuple(self.x.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.classes)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield ``(x, y)`` batches; shuffled deterministically when ``rng`` is given."""
        if len(self) == 0:
            raise EmptyDataset("dataset has no samples")
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for i in range(0, len(self), batch_size):
            idx = order[i : i + batch_size]
            yield self.x[idx], self.y[idx]


def _shape_mask(kind, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        w = r * 0.35
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    raise ValueError(kind)


def synthetic_benchmark(n: int, size: int = 32, seed: int = 0, noise: float = 0.1,
                        clutter: int = 4) -> Dataset:
    """Procedural 10-class image set.

    A class is a shape (disk, square, triangle, ring, cross) filled with a
    horizontal or vertical stripe pattern. Position, scale, stripe period and
    phase, foreground/background colours and pixel noise vary per image, so
    both the outline and the fill texture must be recognised. Classes are
    balanced (``n // 10`` each, remainder spread over the first classes).
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(SYNTH_CLASSES)
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    x = np.empty((n, 3, size, size), dtype=np.float32)
    for i, lab in enumerate(labels):
        kind, orient = SYNTH_CLASSES[lab].split("-")
        r = rng.uniform(0.25, 0.42) * size
        cy, cx = rng.uniform(r * 0.8, size - r * 0.8, size=2)
        mask = _shape_mask(kind, yy, xx, cy, cx, r)
        period = rng.uniform(3.0, 6.0) * size / 32
        phase = rng.uniform(0, 2 * np.pi)
        coord = yy if orient == "h" else xx
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * coord / period + phase)
        fg = rng.uniform(0.3, 1.0, size=3)[:, None, None]
        fg2 = rng.uniform(0.0, 0.5, size=3)[:, None, None]
        bg = rng.uniform(0.0, 1.0, size=3)[:, None, None]
        fill = fg * stripes + fg2 * (1 - stripes)
        # label-independent clutter: a colour gradient and a few bars
        g_dir = rng.normal(size=2)
        grad = (g_dir[0] * (yy - size / 2) + g_dir[1] * (xx - size / 2)) / size
        img = bg + rng.uniform(-0.5, 0.5, size=3)[:, None, None] * grad
        for _ in range(rng.integers(0, clutter + 1)):
            y0, x0 = rng.integers(0, size, size=2)
            h, w = rng.integers(1, max(2, size // 4), size=2)
            img[:, y0 : y0 + h, x0 : x0 + w] = rng.uniform(0.0, 1.0, size=3)[:, None, None]
        img = np.where(mask, fill, img)
        img = img + rng.normal(0.0, noise, size=img.shape)
        x[i] = img
    x = (x - 0.5) / 0.5
    return Dataset(x, labels, SYNTH_CLASSES)


def load_image_folder(root: str, size: int = 32) -> Dataset:
    """Load ``root/<class>/<image>`` files, resized to ``size`` x ``size`` RGB.

    Classes are the sorted sub-directory names. Pixel values are scaled to
    [-1, 1].
    """
    from PIL import Image

    if not os.path.isdir(root):
        raise FileNotFoundError(root)
    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    xs, ys = [], []
    for ci, name in enumerate(classes):
        folder = os.path.join(root, name)
        for fname in sorted(os.listdir(folder)):
            path = os.path.join(folder, fname)
            try:
                with Image.open(path) as im:
                    im = im.convert("RGB").resize((size, size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except OSError:
                continue
            xs.append(arr.transpose(2, 0, 1))
            ys.append(ci)
    if not xs:
        raise EmptyDataset(f"no readable images under {root}")
    x = (np.stack(xs) - 0.5) / 0.5
    return Dataset(x, np.array(ys), tuple(classes))


def save_npz(ds: Dataset, path: str):
    np.savez_compressed(path, x=ds.x, y=ds.y, classes=np.array(ds.classes))


def load_npz(path: str) -> Dataset:
    with np.load(path) as f:
        return Dataset(f["x"], f["y"], tuple(str(c) for c in f["classes"]))
