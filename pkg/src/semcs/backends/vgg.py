"""VGG feature stacks laid out index-for-index like torchvision's
``vgg16().features`` / ``vgg19().features``, so a torchvision state dict
drops in. ``width`` < 1 shrinks every conv for the seeded CPU backend."""

from __future__ import annotations

import torch
from torch import nn

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

VGG_CFG = {
    "vgg16": [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"],
    "vgg19": [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
              512, 512, 512, 512, "M", 512, 512, 512, 512, "M"],
}


def imagenet_normalize(x: torch.Tensor) -> torch.Tensor:
    mean = x.new_tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = x.new_tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return (x - mean) / std


def make_vgg_features(arch: str = "vgg19", width: float = 1.0) -> nn.Sequential:
    layers, prev = [], 3
    for v in VGG_CFG[arch]:
        if v == "M":
            layers.append(nn.MaxPool2d(2, 2))
            continue
        c = max(4, int(round(v * width)))
        conv = nn.Conv2d(prev, c, 3, padding=1)
        nn.init.kaiming_normal_(conv.weight, mode="fan_out", nonlinearity="relu")
        nn.init.zeros_(conv.bias)
        layers += [conv, nn.ReLU(inplace=False)]
        prev = c
    return nn.Sequential(*layers)


def conv_layer_names(arch: str = "vgg19") -> dict[str, int]:
    """Map ``convB_I`` names onto indices of the features Sequential."""
    names, block, conv, idx = {}, 1, 0, 0
    for v in VGG_CFG[arch]:
        if v == "M":
            block, conv = block + 1, 0
            idx += 1
            continue
        conv += 1
        names[f"conv{block}_{conv}"] = idx
        idx += 2
    return names


def load_features_state(features: nn.Sequential, state: dict) -> None:
    """Accept either a full torchvision VGG state dict or a bare features one."""
    if any(k.startswith("features.") for k in state):
        state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
    features.load_state_dict(state, strict=True)


class PerceptualFeatures(nn.Module):
    """Pre-activation conv outputs at named layers (e.g. conv4_2, conv5_2)."""

    def __init__(self, features: nn.Sequential, layers=("conv4_2", "conv5_2"), arch="vgg19"):
        super().__init__()
        index = conv_layer_names(arch)
        self.layers = tuple(layers)
        self.taps = {index[name]: name for name in self.layers}
        self.features = features[: max(self.taps) + 1]
        for p in self.features.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        out = {}
        h = imagenet_normalize(x)
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in self.taps:
                out[self.taps[i]] = h
        return out
