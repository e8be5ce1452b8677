"""Text and image encoders living in a shared embedding space.

``OpenClipEncoders`` wraps a local open_clip checkpoint. The seeded
encoders are small deterministic stand-ins with the same interface, used
for offline runs and tests when no CLIP checkpoint is on disk.
"""

from __future__ import annotations

import zlib
from pathlib import Path

import torch
from torch import nn

from ..errors import ConfigurationError

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
CLIP_INPUT_SIZE = 224


def clip_normalize(x: torch.Tensor) -> torch.Tensor:
    mean = x.new_tensor(CLIP_MEAN).view(1, 3, 1, 1)
    std = x.new_tensor(CLIP_STD).view(1, 3, 1, 1)
    return (x - mean) / std


class HashingTextEncoder(nn.Module):
    """Bag of hashed word unigrams and bigrams, mean pooled, then an MLP.
    Token ids come from crc32 so they are stable across processes."""

    def __init__(self, dim: int = 512, vocab: int = 8192, width: int = 256):
        super().__init__()
        self.dim = dim
        self.vocab = vocab
        self.bag = nn.EmbeddingBag(vocab, width, mode="mean")
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.GELU(), nn.Linear(width, dim))

    def token_ids(self, text: str) -> list[int]:
        words = text.lower().split()
        grams = words + [a + " " + b for a, b in zip(words, words[1:])]
        return [zlib.crc32(g.encode()) % self.vocab for g in grams]

    @torch.no_grad()
    def encode_text(self, text: str) -> torch.Tensor:
        ids = torch.tensor(self.token_ids(text), dtype=torch.long)
        pooled = self.bag(ids.unsqueeze(0))
        return self.mlp(pooled)[0]


class ConvImageEncoder(nn.Module):
    """Strided CNN with global pooling; cheap enough for 64 patches a step on CPU."""

    def __init__(self, dim: int = 512, widths=(24, 48, 96, 192)):
        super().__init__()
        self.dim = dim
        layers, prev = [], 3
        for i, w in enumerate(widths):
            k, s = (7, 4) if i == 0 else (3, 2)
            layers += [nn.Conv2d(prev, w, k, s, k // 2), nn.GELU()]
            prev = w
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(2 * prev, dim)

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        h = self.body(clip_normalize(x))
        pooled = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)
        return self.head(pooled)


class OpenClipEncoders:
    def __init__(self, model, tokenizer):
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = tokenizer
        self.dim = int(model.text_projection.shape[-1]) if hasattr(model, "text_projection") else None

    @torch.no_grad()
    def encode_text(self, text: str) -> torch.Tensor:
        tokens = self.tokenizer([text])
        return self.model.encode_text(tokens).float()[0]

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        return self.model.encode_image(clip_normalize(x)).float()


def load_open_clip(model_name: str, path: Path) -> OpenClipEncoders:
    if path is None or not Path(path).exists():
        raise ConfigurationError(f"CLIP weights not found: {path}")
    try:
        import open_clip
    except ImportError as exc:
        raise ConfigurationError(
            "pretrained CLIP backend needs open_clip_torch (pip install 'artifact[clip]')") from exc
    try:
        model = open_clip.create_model(model_name, pretrained=str(path))
    except Exception as exc:  # open_clip raises a mix of RuntimeError/KeyError
        raise ConfigurationError(f"cannot load CLIP checkpoint {path}: {exc}") from exc
    return OpenClipEncoders(model, open_clip.get_tokenizer(model_name))
