"""Procedurally generated labeled images for smoke tests and demos.

Each expression class gets a distinctive base color plus an oriented
stripe texture, so a small model can separate the classes quickly.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .model import EXPRESSIONS
from .train import LoadedSample

# per-class (RGB base color, stripe frequency, stripe orientation)
_CLASS_STYLES = [
    ((0.9, 0.2, 0.2), 2, 0.0),
    ((0.2, 0.9, 0.2), 3, 0.5),
    ((0.2, 0.2, 0.9), 4, 1.0),
    ((0.9, 0.9, 0.2), 5, 1.5),
    ((0.9, 0.2, 0.9), 6, 2.0),
    ((0.2, 0.9, 0.9), 7, 2.5),
]


def make_image(class_id: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One [3,size,size] image in [0,1] for the given class."""
    color, freq, angle = _CLASS_STYLES[class_id % len(_CLASS_STYLES)]
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    phase = rng.uniform(0, 2 * np.pi)
    axis = np.cos(angle) * xx + np.sin(angle) * yy
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * axis + phase)
    img = np.empty((3, size, size))
    for c in range(3):
        img[c] = color[c] * (0.55 + 0.45 * stripes)
    img += rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def make_synthetic_dataset(n_per_class: int, size: int, seed: int) -> list:
    """Balanced in-memory dataset of LoadedSample, expression labels only."""
    rng = np.random.default_rng(seed)
    samples = []
    for class_id in range(len(EXPRESSIONS)):
        for _ in range(n_per_class):
            samples.append(LoadedSample(image=make_image(class_id, size, rng), expression=class_id))
    return samples


def write_synthetic_dataset(out_dir, n_per_class: int, size: int, seed: int) -> str:
    """Write PNGs plus a manifest CSV under `out_dir`; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for class_id, name in enumerate(EXPRESSIONS):
        for i in range(n_per_class):
            img = make_image(class_id, size, rng)
            rel = f"{name}_{i:03d}.png"
            arr = (img.transpose(1, 2, 0) * 255).round().astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(os.path.join(out_dir, rel))
            rows.append((rel, name, None))
    manifest_path = os.path.join(out_dir, "manifest.csv")
    from .data import emit_manifest

    emit_manifest(manifest_path, rows)
    return manifest_path
