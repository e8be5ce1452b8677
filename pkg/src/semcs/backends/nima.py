from __future__ import annotations

import torch
import torchvision
from torch import nn

from .vgg import imagenet_normalize

NIMA_INPUT_SIZE = 224


class NimaModel(nn.Module):
    """CNN body + dropout + 10-way softmax over rating bins 1..10."""

    def __init__(self, base: nn.Module, base_dim: int):
        super().__init__()
        self.base = base
        self.head = nn.Sequential(nn.Dropout(0.75), nn.Linear(base_dim, 10))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.base(imagenet_normalize(x))
        h = h.mean(dim=(2, 3)) if h.dim() == 4 else h
        return self.head(h).softmax(dim=-1)


def mobilenet_nima() -> NimaModel:
    return NimaModel(torchvision.models.mobilenet_v2(weights=None).features, 1280)


def small_nima() -> NimaModel:
    base = nn.Sequential(
        nn.Conv2d(3, 16, 5, 4, 2), nn.ReLU(),
        nn.Conv2d(16, 32, 3, 2, 1), nn.ReLU(),
        nn.Conv2d(32, 64, 3, 2, 1), nn.ReLU(),
    )
    return NimaModel(base, 64)
