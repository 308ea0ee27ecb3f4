"""Procedural colored-shape datasets used to train the in-repo victims."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.draw import polygon2mask

SHAPES = (
    "circle", "square", "triangle_up", "triangle_down", "diamond",
    "plus", "cross", "ring", "frame", "star",
)
NUM_CLASSES = len(SHAPES)
_SS = 4  # supersampling factor for anti-aliased masks


@dataclass
class LabeledDataset:
    """One split of a dataset.

    ``labels`` is set for classification data, ``annotations`` (per image, a
    list of ``(x0, y0, x1, y1)`` pixel boxes) for detection data.
    """

    images: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray | None = None
    annotations: list | None = None
    split: str = "train"

    def __len__(self):
        return int(self.images.shape[0])

    def validate(self, num_classes=NUM_CLASSES):
        if self.labels is not None and len(self.labels):
            if self.labels.min() < 0 or self.labels.max() >= num_classes:
                raise ValueError("labels out of range")
        if self.annotations is not None:
            h, w = self.images.shape[1:3]
            for boxes in self.annotations:
                for x0, y0, x1, y1 in boxes:
                    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                        raise ValueError(f"box {(x0, y0, x1, y1)} outside {w}x{h} image")


def _polygon(n, r, phase):
    """Regular polygon vertices as (v, u) = (down, right); phase 0 puts a vertex on top."""
    ang = phase + 2 * np.pi * np.arange(n) / n
    return np.stack([-r * np.cos(ang), r * np.sin(ang)], axis=1)


def _shape_mask(kind, size, cy, cx, radius, rot):
    """Anti-aliased coverage in [0, 1] of a shape centred at (cy, cx)."""
    n = size * _SS
    coords = (np.arange(n) + 0.5) / _SS - 0.5
    yy, xx = np.meshgrid(coords - cy, coords - cx, indexing="ij")
    c, s = np.cos(rot), np.sin(rot)
    u, v = c * xx + s * yy, -s * xx + c * yy  # rotated frame (u right, v down)
    r = radius
    bar = 0.32 * r
    if kind == "circle":
        m = u * u + v * v <= r * r
    elif kind == "square":
        m = (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    elif kind == "diamond":
        m = np.abs(u) + np.abs(v) <= r
    elif kind == "plus":
        m = ((np.abs(u) <= bar) | (np.abs(v) <= bar)) & (np.abs(u) <= r) & (np.abs(v) <= r)
    elif kind == "cross":
        a, b = (u + v) / np.sqrt(2), (u - v) / np.sqrt(2)
        m = ((np.abs(a) <= bar) | (np.abs(b) <= bar)) & (np.abs(a) <= r) & (np.abs(b) <= r)
    elif kind == "ring":
        d = u * u + v * v
        m = (d <= r * r) & (d >= (0.55 * r) ** 2)
    elif kind == "frame":
        m = (np.maximum(np.abs(u), np.abs(v)) <= 0.85 * r) & (np.maximum(np.abs(u), np.abs(v)) >= 0.5 * r)
    else:
        if kind == "triangle_up":
            verts = _polygon(3, r, 0.0)
        elif kind == "triangle_down":
            verts = _polygon(3, r, np.pi)
        elif kind == "star":
            outer = _polygon(5, r, 0.0)
            inner = _polygon(5, 0.45 * r, np.pi / 5)
            verts = np.empty((10, 2))
            verts[0::2], verts[1::2] = outer, inner
        else:
            raise ValueError(f"unknown shape {kind!r}")
        # back to image axes (inverse of the u/v rotation), then to supersample indices
        vv, uu = verts[:, 0], verts[:, 1]
        rv = np.stack([s * uu + c * vv + cy, c * uu - s * vv + cx], axis=1)
        rv = (rv + 0.5) * _SS - 0.5
        m = polygon2mask((n, n), rv)
    cov = m.reshape(size, _SS, size, _SS).mean(axis=(1, 3))
    return cov.astype(np.float32)


def _background(rng, size):
    base = rng.uniform(0.15, 0.85, size=3)
    low = rng.normal(size=(6, 6, 3))
    tex = ndimage.zoom(low, (size / 6, size / 6, 1), order=1)[:size, :size]
    img = base + 0.08 * tex + 0.02 * rng.normal(size=(size, size, 3))
    return np.clip(img, 0, 1), base


def _shape_color(rng, base):
    for _ in range(100):
        col = rng.uniform(0, 1, size=3)
        if np.abs(col - base).mean() > 0.3:
            return col
    return 1.0 - base


def render_shape_image(rng, kind, size=32, radius=None, center=None):
    img, base = _background(rng, size)
    radius = radius if radius is not None else rng.uniform(0.22, 0.34) * size
    if center is None:
        j = 0.12 * size
        center = (size / 2 + rng.uniform(-j, j), size / 2 + rng.uniform(-j, j))
    rot = rng.uniform(-0.2, 0.2)
    mask = _shape_mask(kind, size, center[0], center[1], radius, rot)[..., None]
    col = _shape_color(rng, base)
    return np.clip(img * (1 - mask) + col * mask, 0, 1).astype(np.float32)


def make_classification_data(n_train=3000, n_test=1000, size=32, seed=0):
    """Balanced 10-class shape images; returns ``(train, test)``."""
    ss = np.random.SeedSequence(seed)
    out = []
    for split, n, child in zip(("train", "test"), (n_train, n_test), ss.spawn(2)):
        rng = np.random.default_rng(child)
        labels = (np.arange(n) % NUM_CLASSES).astype(np.int64)
        rng.shuffle(labels)
        images = np.stack([render_shape_image(rng, SHAPES[k], size) for k in labels]) if n else \
            np.zeros((0, size, size, 3), np.float32)
        out.append(LabeledDataset(images, labels=labels, split=split))
    return tuple(out)


def render_detection_image(rng, size=32, grid=4, max_objects=3):
    """1..max_objects shapes, each centred inside a distinct grid cell."""
    img, base = _background(rng, size)
    cell = size / grid
    n = int(rng.integers(1, max_objects + 1))
    cells = rng.choice(grid * grid, size=n, replace=False)
    boxes = []
    for c in cells:
        gy, gx = divmod(int(c), grid)
        cy = (gy + rng.uniform(0.2, 0.8)) * cell
        cx = (gx + rng.uniform(0.2, 0.8)) * cell
        radius = rng.uniform(0.45, 0.75) * cell
        kind = SHAPES[int(rng.integers(NUM_CLASSES))]
        mask = _shape_mask(kind, size, cy, cx, radius, rng.uniform(-0.2, 0.2))
        col = _shape_color(rng, base)
        img = img * (1 - mask[..., None]) + col * mask[..., None]
        ys, xs = np.nonzero(mask > 0.5)
        if len(ys) == 0:
            continue
        boxes.append((float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)))
    return np.clip(img, 0, 1).astype(np.float32), boxes


def make_detection_data(n_train=2000, n_test=500, size=32, grid=4, seed=0):
    ss = np.random.SeedSequence(seed)
    out = []
    for split, n, child in zip(("train", "test"), (n_train, n_test), ss.spawn(2)):
        rng = np.random.default_rng(child)
        pairs = [render_detection_image(rng, size, grid) for _ in range(n)]
        images = np.stack([p[0] for p in pairs]) if pairs else np.zeros((0, size, size, 3), np.float32)
        out.append(LabeledDataset(images, annotations=[p[1] for p in pairs], split=split))
    return tuple(out)
