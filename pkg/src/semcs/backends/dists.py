"""DISTS: structure and texture similarity over VGG16 stages with
Hanning L2-pooling in place of max-pooling."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .vgg import imagenet_normalize, make_vgg_features

# input + the five VGG16 stages
STAGE_CHANNELS = (3, 64, 128, 256, 512, 512)
# slices of vgg16().features making up stages 1..5 (pools replaced)
STAGE_SLICES = ((0, 4), (5, 9), (10, 16), (17, 23), (24, 30))


class L2Pool(nn.Module):
    def __init__(self, channels: int, filter_size: int = 5, stride: int = 2):
        super().__init__()
        self.stride = stride
        self.padding = (filter_size - 2) // 2
        self.channels = channels
        a = np.hanning(filter_size)[1:-1]
        g = torch.tensor(a[:, None] * a[None, :], dtype=torch.float32)
        g = g / g.sum()
        self.register_buffer("filter", g[None, None].repeat(channels, 1, 1, 1))

    def forward(self, x):
        out = F.conv2d(x ** 2, self.filter.to(x.dtype), stride=self.stride,
                       padding=self.padding, groups=self.channels)
        return (out + 1e-12).sqrt()


class Dists(nn.Module):
    def __init__(self, features: nn.Sequential, alpha: torch.Tensor, beta: torch.Tensor):
        super().__init__()
        chans = [m.out_channels for m in features if isinstance(m, nn.Conv2d)]
        widths = (3, chans[1], chans[3], chans[6], chans[9], chans[12])
        self.channels = widths
        stages = []
        for i, (lo, hi) in enumerate(STAGE_SLICES):
            mods = [L2Pool(widths[i])] if i > 0 else []
            mods += list(features[lo:hi])
            stages.append(nn.Sequential(*mods))
        self.stages = nn.ModuleList(stages)
        total = sum(widths)
        if alpha.numel() != total or beta.numel() != total:
            raise ValueError(f"alpha/beta must have {total} entries")
        self.register_buffer("alpha", alpha.reshape(1, total, 1, 1).float())
        self.register_buffer("beta", beta.reshape(1, total, 1, 1).float())
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def _features(self, x):
        feats = [x]
        h = imagenet_normalize(x)
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        fx, fy = self._features(x), self._features(y)
        w_sum = self.alpha.sum() + self.beta.sum()
        alpha = torch.split(self.alpha / w_sum, list(self.channels), dim=1)
        beta = torch.split(self.beta / w_sum, list(self.channels), dim=1)
        c1 = c2 = 1e-6
        dist1 = dist2 = 0
        for k in range(len(self.channels)):
            x_mean = fx[k].mean([2, 3], keepdim=True)
            y_mean = fy[k].mean([2, 3], keepdim=True)
            s1 = (2 * x_mean * y_mean + c1) / (x_mean ** 2 + y_mean ** 2 + c1)
            dist1 = dist1 + (alpha[k] * s1).sum(1, keepdim=True)
            x_var = ((fx[k] - x_mean) ** 2).mean([2, 3], keepdim=True)
            y_var = ((fy[k] - y_mean) ** 2).mean([2, 3], keepdim=True)
            cov = (fx[k] * fy[k]).mean([2, 3], keepdim=True) - x_mean * y_mean
            s2 = (2 * cov + c2) / (x_var + y_var + c2)
            dist2 = dist2 + (beta[k] * s2).sum(1, keepdim=True)
        return 1 - (dist1 + dist2).flatten()


def vgg16_dists(features: nn.Sequential | None = None, alpha=None, beta=None,
                width: float = 1.0) -> Dists:
    features = features if features is not None else make_vgg_features("vgg16", width)
    chans = [m.out_channels for m in features if isinstance(m, nn.Conv2d)]
    total = 3 + chans[1] + chans[3] + chans[6] + chans[9] + chans[12]
    if alpha is None:
        alpha = torch.full((total,), 0.1)
    if beta is None:
        beta = torch.full((total,), 0.1)
    return Dists(features, alpha, beta)
