"""Image I/O and conversions. Images are float32 ``(H, W, 3)`` arrays in
[0, 1] on the numpy side and ``(1, 3, H, W)`` tensors on the torch side."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import InputError


def load_image(path: str | os.PathLike, size: int | None = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise InputError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None:
                im = im.resize((size, size), Image.BICUBIC)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise InputError(f"cannot decode image {path}: {exc}") from exc
    return arr


def check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise InputError("image has non-finite values")
    return image


def save_image(path: str | os.PathLike, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(check_image(image))).permute(2, 0, 1)[None].to(dtype)


def to_numpy(x: torch.Tensor) -> np.ndarray:
    return x.detach()[0].permute(1, 2, 0).cpu().numpy().astype(np.float32)


def resize_tensor(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bicubic", align_corners=False).clamp(0, 1)
