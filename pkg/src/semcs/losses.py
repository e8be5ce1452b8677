"""Text/image direction losses and the auxiliary content/TV terms.

All loss functions are torch-differentiable. Directions are raw
differences of encoder outputs; the cosine takes care of scale.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .backends.clip import CLIP_INPUT_SIZE
from .config import LossWeights
from .errors import DegenerateDirectionError, InputError, NumericalError
from .imaging import to_tensor

log = logging.getLogger(__name__)

MIN_DIRECTION_NORM = 1e-12
TERMS = ("fglob", "bglob", "content", "tv", "patch")
_TERM_WEIGHT = {"fglob": "lambda_fg", "bglob": "lambda_bg", "content": "lambda_content",
                "tv": "lambda_tv", "patch": "lambda_patch"}


@dataclass
class TextEmbedding:
    vector: torch.Tensor
    source_text: str


@dataclass
class ImageEmbedding:
    vector: torch.Tensor
    region: str = "full"


@dataclass
class DirectionVector:
    vector: torch.Tensor
    kind: str
    side: str = "foreground"


@dataclass
class LossBreakdown:
    fglob: float = 0.0
    bglob: float = 0.0
    content: float = 0.0
    tv: float = 0.0
    patch: float = 0.0
    total: float = 0.0

    def record(self, iteration: int) -> dict:
        return {"iter": iteration, **asdict(self)}


def _vec(x) -> torch.Tensor:
    if isinstance(x, (TextEmbedding, ImageEmbedding, DirectionVector)):
        x = x.vector
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    return x


def _as_batch(image) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        return to_tensor(image)
    return image if image.dim() == 4 else image.unsqueeze(0)


# ---------------------------------------------------------------- encoders

def encode_text(text: str, encoder) -> TextEmbedding:
    if not text or not text.strip():
        raise InputError("text to encode must be non-empty")
    vec = encoder.encode_text(text)
    if not torch.all(torch.isfinite(vec)) or vec.norm() == 0:
        raise NumericalError(f"text encoder produced a degenerate embedding for {text!r}")
    return TextEmbedding(vec, text)


def encode_image(image, encoder, auto_resize: bool = True, region: str = "full") -> ImageEmbedding:
    """Embed a ``(B, 3, H, W)`` batch (or one numpy image). Inputs are
    brought to 224x224 unless ``auto_resize`` is off, in which case any
    other size is an error."""
    x = _as_batch(image)
    if tuple(x.shape[-2:]) != (CLIP_INPUT_SIZE, CLIP_INPUT_SIZE):
        if not auto_resize:
            raise InputError(
                f"image encoder expects {CLIP_INPUT_SIZE}x{CLIP_INPUT_SIZE}, got {tuple(x.shape[-2:])}")
        x = F.interpolate(x, size=(CLIP_INPUT_SIZE, CLIP_INPUT_SIZE), mode="bicubic",
                          align_corners=False)
    return ImageEmbedding(encoder.encode_image(x), region)


# ---------------------------------------------------------------- directions

def _difference(a, b, kind: str, side: str) -> DirectionVector:
    a, b = _vec(a), _vec(b)
    if a.shape[-1] != b.shape[-1]:
        raise InputError(f"embedding sizes differ: {a.shape[-1]} vs {b.shape[-1]}")
    return DirectionVector(a - b, kind, side)


def text_direction(style_text, source_text, side: str = "foreground") -> DirectionVector:
    return _difference(style_text, source_text, "text", side)


def image_direction(region_embedding, content_embedding, side: str = "foreground") -> DirectionVector:
    return _difference(region_embedding, content_embedding, "image", side)


def directional_loss(image_dir, text_dir) -> torch.Tensor:
    """``1 - cos(image_dir, text_dir)`` along the last axis, in [0, 2].

    Batched image directions broadcast against one text direction.
    """
    a, b = _vec(image_dir), _vec(text_dir)
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na < MIN_DIRECTION_NORM).any()) or bool((nb < MIN_DIRECTION_NORM).any()):
        raise DegenerateDirectionError("direction vector has zero norm")
    cos = (a * b).sum(dim=-1) / (na * nb)
    return (1.0 - cos).clamp(0.0, 2.0)


def safe_directional_loss(image_dir, text_dir, name: str = "directional") -> torch.Tensor:
    """Like :func:`directional_loss`, but rows with a zero-norm direction
    contribute 0 (with a warning) instead of raising."""
    a, b = _vec(image_dir), _vec(text_dir)
    # NaN norms are not "degenerate": let them through so the caller sees them
    ok = ~(a.norm(dim=-1) < MIN_DIRECTION_NORM) & ~(b.norm(dim=-1) < MIN_DIRECTION_NORM)
    if bool(ok.all()):
        return directional_loss(a, b)
    log.warning("%s: zero-norm direction, term set to 0", name)
    a, b = torch.broadcast_tensors(a, b)
    out = torch.zeros(ok.shape, dtype=a.dtype)
    if bool(ok.any()):
        out = out.masked_scatter(ok, directional_loss(a[ok], b[ok]))
    return out


# ---------------------------------------------------------------- auxiliary

def content_loss(output, content, features) -> torch.Tensor:
    """Sum over perceptual layers of the mean squared feature difference."""
    x, y = _as_batch(output), _as_batch(content)
    if x.shape[-2:] != y.shape[-2:]:
        raise InputError(f"resolution mismatch: {tuple(x.shape[-2:])} vs {tuple(y.shape[-2:])}")
    fx = features(x)
    with torch.no_grad():
        fy = features(y)
    loss = x.new_zeros(())
    for name in fx:
        loss = loss + torch.mean((fx[name] - fy[name]) ** 2)
    return loss


def tv_loss(image) -> torch.Tensor:
    """Squared anisotropic total variation.

    Mean squared vertical neighbour difference plus mean squared horizontal
    difference, averaged over channels (and batch). An axis of length 1
    contributes nothing.
    """
    x = _as_batch(image)
    loss = x.new_zeros(())
    if x.shape[-2] > 1:
        loss = loss + ((x[..., 1:, :] - x[..., :-1, :]) ** 2).mean()
    if x.shape[-1] > 1:
        loss = loss + ((x[..., :, 1:] - x[..., :, :-1]) ** 2).mean()
    return loss


# ---------------------------------------------------------------- composition

def weighted_total(terms: Mapping[str, torch.Tensor | float], weights: LossWeights):
    """Weighted sum in the fixed order fglob, bglob, content, tv, patch."""
    total = 0.0
    for name in TERMS:
        value = terms.get(name, 0.0)
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericalError(f"loss term {name} is not finite", {"term": name, "value": v})
        total = total + getattr(weights, _TERM_WEIGHT[name]) * value
    return total


def total_loss(terms: Mapping[str, torch.Tensor | float], weights: LossWeights) -> LossBreakdown:
    total = weighted_total(terms, weights)
    as_float = {name: float(terms.get(name, 0.0)) for name in TERMS}
    return LossBreakdown(**as_float, total=float(total))
