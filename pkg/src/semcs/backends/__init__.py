"""Model handles consumed by segmentation, losses and evaluation.

Two kinds exist. ``pretrained`` loads weight files named in the config
(relative names resolve under ``$SEMCS_WEIGHTS_DIR``) and raises
:class:`ConfigurationError` when one is missing. ``seeded`` builds the same
interfaces from deterministic random initializations; outputs are
reproducible but carry no learned semantics.

Handles are read-only once built and load lazily, so a segmentation-only
run never touches CLIP or the metric networks.
"""

from __future__ import annotations

import functools
from contextlib import contextmanager
from pathlib import Path

import torch

from ..config import RunConfig, weights_path
from ..errors import ConfigurationError
from .clip import ConvImageEncoder, HashingTextEncoder, load_open_clip
from .dists import Dists, vgg16_dists
from .nima import NimaModel, mobilenet_nima, small_nima
from .vgg import PerceptualFeatures, imagenet_normalize, load_features_state, make_vgg_features
from .vit import VisionTransformer, dino_vit_base, tiny_vit

BACKEND_KINDS = ("pretrained", "seeded")

# per-component offsets so seeded handles don't share random streams
_SEED_OFFSETS = {"vit": 11, "text": 23, "image": 37, "perceptual": 41, "dists": 53, "nima": 67}


@contextmanager
def seeded(seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def _load_state(path: Path | None, what: str) -> dict:
    if path is None:
        raise ConfigurationError(f"no weights configured for {what}")
    if not path.exists():
        raise ConfigurationError(f"{what} weights not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ConfigurationError(f"cannot read {what} weights {path}: {exc}") from exc
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    return state


def _strict_load(module: torch.nn.Module, state: dict, what: str) -> None:
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ConfigurationError(f"{what} weights do not match the architecture: {exc}") from exc


class FeatureExtractor:
    """ViT patch features for the spectral segmentation graph."""

    def __init__(self, model: VisionTransformer, which: str = "key"):
        if which not in ("key", "query", "value", "token"):
            raise ConfigurationError(f"unknown feature kind {which!r}")
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.which = which
        self.patch_size = model.patch_size

    @torch.no_grad()
    def __call__(self, x: torch.Tensor):
        feats, grid = self.model.last_block_features(imagenet_normalize(x), self.which)
        return feats[0], grid


class TextEncoderHandle:
    def __init__(self, impl):
        self.impl = impl

    def encode_text(self, text: str) -> torch.Tensor:
        return self.impl.encode_text(text)


class ImageEncoderHandle:
    def __init__(self, impl):
        self.impl = impl
        if isinstance(impl, torch.nn.Module):
            impl.eval()
            for p in impl.parameters():
                p.requires_grad_(False)

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        return self.impl.encode_image(x)


class Backends:
    def __init__(self, config: RunConfig):
        if config.backend not in BACKEND_KINDS:
            raise ConfigurationError(
                f"backend must be one of {BACKEND_KINDS}, got {config.backend!r}")
        self.config = config
        self.kind = config.backend

    def _seed(self, name: str) -> int:
        return self.config.backend_seed * 1000 + _SEED_OFFSETS[name]

    @functools.cached_property
    def feature_extractor(self) -> FeatureExtractor:
        seg = self.config.segmentation
        if self.kind == "seeded":
            with seeded(self._seed("vit")):
                model = tiny_vit(seg.patch_size)
        else:
            model = dino_vit_base(seg.patch_size)
            state = _load_state(weights_path(seg.backbone_weights, "dino_vitbase16_pretrain.pth"),
                                "segmentation.backbone_weights")
            state = {k: v for k, v in state.items() if not k.startswith("head.")}
            _strict_load(model, state, "segmentation.backbone_weights")
        return FeatureExtractor(model, seg.feature)

    @functools.cached_property
    def _clip(self):
        cfg = self.config.clip
        text_path = weights_path(cfg.text_weights, f"clip_{cfg.model}.pt")
        image_path = weights_path(cfg.image_weights, f"clip_{cfg.model}.pt")
        text = load_open_clip(cfg.model, text_path)
        image = text if image_path == text_path else load_open_clip(cfg.model, image_path)
        return text, image

    @functools.cached_property
    def text_encoder(self) -> TextEncoderHandle:
        if self.kind == "seeded":
            with seeded(self._seed("text")):
                return TextEncoderHandle(HashingTextEncoder().eval())
        return TextEncoderHandle(self._clip[0])

    @functools.cached_property
    def image_encoder(self) -> ImageEncoderHandle:
        if self.kind == "seeded":
            with seeded(self._seed("image")):
                return ImageEncoderHandle(ConvImageEncoder())
        return ImageEncoderHandle(self._clip[1])

    @functools.cached_property
    def perceptual(self) -> PerceptualFeatures:
        layers = self.config.perceptual.layers
        if self.kind == "seeded":
            with seeded(self._seed("perceptual")):
                return PerceptualFeatures(make_vgg_features("vgg19", width=0.25), layers)
        features = make_vgg_features("vgg19")
        state = _load_state(weights_path(self.config.perceptual.weights, "vgg19.pth"),
                            "perceptual.weights")
        try:
            load_features_state(features, state)
        except RuntimeError as exc:
            raise ConfigurationError(f"perceptual.weights mismatch: {exc}") from exc
        return PerceptualFeatures(features, layers)

    @functools.cached_property
    def dists(self) -> Dists:
        ev = self.config.eval
        if self.kind == "seeded":
            with seeded(self._seed("dists")):
                return vgg16_dists(width=0.25).double()
        ab = _load_state(weights_path(ev.dists_weights, "dists_weights.pt"), "eval.dists_weights")
        if "alpha" not in ab or "beta" not in ab:
            raise ConfigurationError("eval.dists_weights must hold 'alpha' and 'beta'")
        features = make_vgg_features("vgg16")
        state = _load_state(weights_path(ev.dists_backbone, "vgg16.pth"), "eval.dists_backbone")
        try:
            load_features_state(features, state)
        except RuntimeError as exc:
            raise ConfigurationError(f"eval.dists_backbone mismatch: {exc}") from exc
        try:
            return Dists(features, ab["alpha"], ab["beta"]).double()
        except ValueError as exc:
            raise ConfigurationError(f"eval.dists_weights: {exc}") from exc

    @functools.cached_property
    def nima(self) -> NimaModel:
        if self.kind == "seeded":
            with seeded(self._seed("nima")):
                model = small_nima()
        else:
            model = mobilenet_nima()
            state = _load_state(weights_path(self.config.eval.nima_weights, "nima_mobilenet.pth"),
                                "eval.nima_weights")
            _strict_load(model, state, "eval.nima_weights")
        for p in model.parameters():
            p.requires_grad_(False)
        return model.eval()


__all__ = [
    "Backends", "FeatureExtractor", "TextEncoderHandle", "ImageEncoderHandle",
    "BACKEND_KINDS", "seeded",
]
