"""Synthetic content images with a known salient object.

Used for fixtures, smoke runs and the mini-benchmark, where no photo
collection is available. Each scene is a textured background with one
coloured object; the object mask doubles as ground truth.
"""

from __future__ import annotations

import numpy as np


def disc_scene(size: int = 224, seed: int = 0):
    """Textured green field with a red disc slightly off centre."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size] / size
    img = np.empty((size, size, 3), np.float32)
    img[..., 0] = 0.25 + 0.1 * np.sin(12 * xx)
    img[..., 1] = 0.55 + 0.1 * np.cos(9 * yy)
    img[..., 2] = 0.2
    disc = (yy - 0.48) ** 2 + (xx - 0.54) ** 2 < 0.27 ** 2
    img[disc] = [0.85, 0.2, 0.25]
    img += rng.normal(0, 0.02, img.shape).astype(np.float32)
    return np.clip(img, 0, 1), disc


def object_scene(size: int = 224, seed: int = 0):
    """Random smooth background plus one ellipse or rectangle of a
    contrasting colour. Returns ``(image, object_mask)``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size] / size
    base = rng.uniform(0.2, 0.8, 3)
    img = np.empty((size, size, 3), np.float32)
    for c in range(3):
        fx, fy = rng.uniform(2, 14, 2)
        phase = rng.uniform(0, 2 * np.pi)
        img[..., c] = base[c] + 0.12 * np.sin(fx * xx + phase) * np.cos(fy * yy)
    cy, cx = rng.uniform(0.35, 0.65, 2)
    ry, rx = rng.uniform(0.15, 0.3, 2)
    if rng.random() < 0.5:
        obj = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
    else:
        obj = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
    colour = (base + rng.uniform(0.35, 0.6, 3) * rng.choice([-1, 1], 3)) % 1.0
    shade = 0.9 + 0.1 * np.cos(20 * (yy - cy))[obj]
    img[obj] = colour[None, :] * shade[:, None]
    img += rng.normal(0, 0.015, img.shape).astype(np.float32)
    return np.clip(img, 0, 1).astype(np.float32), obj
