"""Lightweight U-Net used as the per-image stylization network."""

import torch
import torch.nn.functional as F
from torch import nn


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, padding_mode="reflect"),
                         nn.InstanceNorm2d(cout, affine=True), nn.LeakyReLU(0.2))


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(_conv(ch, ch), nn.Conv2d(ch, ch, 3, 1, 1, padding_mode="reflect"),
                                  nn.InstanceNorm2d(ch, affine=True))

    def forward(self, x):
        return x + self.body(x)


class Down(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.body = nn.Sequential(_conv(cin, cout, stride=2), _conv(cout, cout))

    def forward(self, x):
        return self.body(x)


class Up(nn.Module):
    def __init__(self, cin, cskip, cout):
        super().__init__()
        self.reduce = _conv(cin, cout)
        self.fuse = _conv(cout + cskip, cout)

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
        return self.fuse(torch.cat([self.reduce(x), skip], dim=1))


class StyleNet(nn.Module):
    """Three downsampling blocks, a residual bottleneck, three upsampling
    blocks with skips, and a sigmoid head so outputs stay in [0, 1]."""

    def __init__(self, ngf: int = 16, n_res: int = 2):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, ngf, 1), _conv(ngf, ngf))
        self.down1 = Down(ngf, ngf * 2)
        self.down2 = Down(ngf * 2, ngf * 4)
        self.down3 = Down(ngf * 4, ngf * 8)
        self.bottleneck = nn.Sequential(*[ResBlock(ngf * 8) for _ in range(n_res)])
        self.up3 = Up(ngf * 8, ngf * 4, ngf * 4)
        self.up2 = Up(ngf * 4, ngf * 2, ngf * 2)
        self.up1 = Up(ngf * 2, ngf, ngf)
        self.head = nn.Conv2d(ngf, 3, 3, 1, 1, padding_mode="reflect")

    def forward(self, x):
        s0 = self.stem(x)
        s1 = self.down1(s0)
        s2 = self.down2(s1)
        h = self.bottleneck(self.down3(s2))
        h = self.up3(h, s2)
        h = self.up2(h, s1)
        h = self.up1(h, s0)
        return torch.sigmoid(self.head(h))
