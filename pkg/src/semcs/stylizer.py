"""Per-image semantic stylization.

A fresh :class:`~semcs.stylenet.StyleNet` is optimised for every content
image. Each step splits the network output with the saliency mask,
scores the foreground and background halves against their own text
directions, and adds content, TV and (optionally) patch terms.
"""

from __future__ import annotations

import json
import logging
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from .backends import seeded
from .backends.clip import CLIP_INPUT_SIZE
from .config import TrainingConfig, config_hash, run_config_hash
from .errors import InputError, NumericalError
from .imaging import check_image, save_image, to_numpy, to_tensor
from .losses import (
    LossBreakdown,
    content_loss,
    encode_image,
    encode_text,
    image_direction,
    safe_directional_loss,
    text_direction,
    tv_loss,
    weighted_total,
)
from .segmentation import SaliencyMask, save_mask
from .stylenet import StyleNet

log = logging.getLogger(__name__)

PROMPT_DELIMITER = "||"
SOURCE_TEXT = "Photo"


@dataclass
class StylePrompt:
    foreground_text: str
    background_text: str
    source_text: str = SOURCE_TEXT
    mode: str = "single"

    def __post_init__(self):
        if not self.foreground_text:
            raise InputError("foreground text must be non-empty")
        if self.mode == "single" and self.background_text != self.foreground_text:
            raise InputError("single-mode prompts use one text for both regions")

    @property
    def raw(self) -> str:
        if self.mode == "single":
            return self.foreground_text
        return f"{self.foreground_text}{PROMPT_DELIMITER}{self.background_text}"


def parse_style_text(raw: str) -> StylePrompt:
    """``"fg||bg"`` gives a double prompt, anything else a single one."""
    if raw is None or not raw.strip():
        raise InputError("style text must be non-empty")
    parts = [p.strip() for p in raw.split(PROMPT_DELIMITER)]
    if len(parts) == 1:
        return StylePrompt(parts[0], parts[0], mode="single")
    if len(parts) > 2 or not all(parts):
        raise InputError(f"expected 'foreground{PROMPT_DELIMITER}background', got {raw!r}")
    return StylePrompt(parts[0], parts[1], mode="double")


def compose_regions(stylized, content, mask):
    """Split ``stylized`` into ``mask * stylized`` and ``(1 - mask) * stylized``.

    Works on torch tensors ``(B, C, H, W)`` with a ``(H, W)``/``(1, 1, H, W)``
    mask, or numpy ``(H, W, C)`` images with an ``(H, W)`` mask.
    """
    if isinstance(mask, SaliencyMask):
        mask = mask.pixels
    if isinstance(stylized, torch.Tensor):
        m = torch.as_tensor(mask, dtype=stylized.dtype)
        if m.dim() == 2:
            m = m[None, None]
        if stylized.shape[-2:] != m.shape[-2:] or stylized.shape != content.shape:
            raise InputError(f"shape mismatch: stylized {tuple(stylized.shape)}, "
                             f"content {tuple(content.shape)}, mask {tuple(m.shape)}")
        return m * stylized, (1 - m) * stylized
    stylized, content = np.asarray(stylized), np.asarray(content)
    m = np.asarray(mask, dtype=stylized.dtype)
    if stylized.shape != content.shape or stylized.shape[:2] != m.shape[:2]:
        raise InputError(f"shape mismatch: stylized {stylized.shape}, content {content.shape}, "
                         f"mask {m.shape}")
    if m.ndim == 2 and stylized.ndim == 3:
        m = m[..., None]
    return m * stylized, (1 - m) * stylized


# ---------------------------------------------------------------- augmentation

def _randint(lo: int, hi: int, gen: torch.Generator) -> int:
    return int(torch.randint(lo, hi, (1,), generator=gen).item())


def perspective_points(width: int, height: int, distortion_scale: float, gen: torch.Generator):
    """Corner correspondences drawn exactly as torchvision's
    ``RandomPerspective.get_params``, but from an explicit generator."""
    hw, hh = width // 2, height // 2
    dx, dy = int(distortion_scale * hw), int(distortion_scale * hh)
    topleft = [_randint(0, dx + 1, gen), _randint(0, dy + 1, gen)]
    topright = [_randint(width - dx - 1, width, gen), _randint(0, dy + 1, gen)]
    botright = [_randint(width - dx - 1, width, gen), _randint(height - dy - 1, height, gen)]
    botleft = [_randint(0, dx + 1, gen), _randint(height - dy - 1, height, gen)]
    start = [[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]]
    return start, [topleft, topright, botright, botleft]


def augment_patches(image: torch.Tensor, config: TrainingConfig, gen: torch.Generator,
                    mask: torch.Tensor | None = None, out_size: int = CLIP_INPUT_SIZE):
    """``batch_size`` random crops, each warped ``n_perspective_augs`` times.

    Returns the ``(N, 3, out_size, out_size)`` patch stack and, when a mask
    is given, the foreground fraction of the crop behind every patch.
    """
    H, W = image.shape[-2:]
    c = config.crop_size
    if c > min(H, W):
        raise InputError(f"crop size {c} exceeds image size {H}x{W}")
    patches, fractions = [], []
    for _ in range(config.batch_size):
        top, left = _randint(0, H - c + 1, gen), _randint(0, W - c + 1, gen)
        crop = image[..., top:top + c, left:left + c]
        frac = float(mask[..., top:top + c, left:left + c].mean()) if mask is not None else 1.0
        for _ in range(config.n_perspective_augs):
            start, end = perspective_points(c, c, config.distortion_scale, gen)
            warped = crop if start == end else TF.perspective(
                crop, start, end, interpolation=TF.InterpolationMode.BILINEAR, fill=None)
            patches.append(warped)
            fractions.append(frac)
    stack = torch.cat(patches, dim=0)
    if out_size is not None and stack.shape[-1] != out_size:
        stack = F.interpolate(stack, size=(out_size, out_size), mode="bicubic", align_corners=False)
    return stack, torch.tensor(fractions)


# ---------------------------------------------------------------- optimisation

@dataclass
class StylizationResult:
    output_image: np.ndarray
    mask: SaliencyMask
    loss_trace: list[LossBreakdown]
    manifest: dict = field(default_factory=dict)

    def save(self, out_dir: str | os.PathLike) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"output": out / "output.png", "mask": out / "mask.png",
                 "trace": out / "trace.jsonl", "manifest": out / "manifest.json"}
        save_image(paths["output"], self.output_image)
        save_mask(self.mask, paths["mask"])
        write_trace(paths["trace"], self.loss_trace)
        paths["manifest"].write_text(json.dumps(self.manifest, indent=2, sort_keys=True))
        return paths


def write_trace(path: str | os.PathLike, trace: list[LossBreakdown]) -> None:
    with open(path, "w") as fh:
        for i, entry in enumerate(trace):
            fh.write(json.dumps(entry.record(i)) + "\n")


class StylizationAborted(NumericalError):
    def __init__(self, message, diagnostics=None, trace=None):
        super().__init__(message, diagnostics)
        self.trace = trace or []


def _text_directions(prompt: StylePrompt, encoder):
    """Encode each distinct text once; return (fg, bg) text directions."""
    cache = {}
    for text in (prompt.foreground_text, prompt.background_text, prompt.source_text):
        if text not in cache:
            cache[text] = encode_text(text, encoder)
    src = cache[prompt.source_text]
    return (text_direction(cache[prompt.foreground_text], src, "foreground"),
            text_direction(cache[prompt.background_text], src, "background"))


def patch_directional_loss(patches, fractions, content_emb, fg_dir, bg_dir, encoder,
                           threshold: float | None = None) -> torch.Tensor:
    """Directional loss per augmented patch, supervised by the text of the
    region covering most of the patch's crop; mean over patches."""
    emb = encode_image(patches, encoder, region="patch").vector
    img_dir = image_direction(emb, content_emb.vector).vector
    is_fg = (fractions >= 0.5).unsqueeze(-1)
    txt = torch.where(is_fg, fg_dir.vector.to(emb.dtype), bg_dir.vector.to(emb.dtype))
    losses = safe_directional_loss(img_dir, txt, "patch")
    if threshold is not None:
        losses = torch.where(losses < threshold, torch.zeros_like(losses), losses)
    return losses.mean()


def stylize(content: np.ndarray, prompt: StylePrompt, mask: SaliencyMask | None,
            config: TrainingConfig, backends, run_config: dict | None = None,
            callback=None) -> StylizationResult:
    """Optimise a fresh StyleNet on one content image and return its output.

    The mask is treated as a constant. ``callback(i, breakdown)`` is called
    after every step.
    """
    start_time = time.time()
    content = check_image(content)
    H, W = content.shape[:2]
    warnings = []
    if mask is None:
        mask = SaliencyMask.full((H, W))
        warnings.append("no mask given; whole image treated as foreground")
    if mask.shape != (H, W):
        raise InputError(f"mask shape {mask.shape} does not match image {(H, W)}")
    if mask.degenerate and not mask.pixels.all():
        mask = SaliencyMask.full((H, W))
    if mask.degenerate:
        warnings.append("degenerate segmentation; whole image treated as foreground")
        log.warning(warnings[-1])

    weights = config.weights
    x = to_tensor(content)
    m = torch.from_numpy(mask.pixels.astype(np.float32))[None, None]
    text_enc, image_enc = backends.text_encoder, backends.image_encoder
    fg_dir, bg_dir = _text_directions(prompt, text_enc)
    with torch.no_grad():
        content_emb = encode_image(x, image_enc)

    with seeded(config.seed):
        net = StyleNet()
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=config.lr_step, gamma=config.lr_gamma)

    trace: list[LossBreakdown] = []
    for it in range(config.iterations):
        stylized = net(x)
        i_fg, i_bg = compose_regions(stylized, x, m)
        terms = {
            "fglob": safe_directional_loss(
                image_direction(encode_image(i_fg, image_enc), content_emb).vector, fg_dir, "fglob"),
            "bglob": safe_directional_loss(
                image_direction(encode_image(i_bg, image_enc), content_emb).vector, bg_dir, "bglob"),
            "content": (content_loss(stylized, x, backends.perceptual)
                        if weights.lambda_content > 0 else stylized.new_zeros(())),
            "tv": tv_loss(stylized),
        }
        if weights.lambda_patch > 0:
            patches, fractions = augment_patches(stylized, config, gen, m)
            terms["patch"] = patch_directional_loss(
                patches, fractions, content_emb, fg_dir, bg_dir, image_enc, config.patch_threshold)
        try:
            total = weighted_total(terms, weights)
        except NumericalError as exc:
            raise StylizationAborted(f"iteration {it}: {exc}", exc.diagnostics, trace) from exc
        entry = LossBreakdown(**{k: float(v.detach()) for k, v in terms.items()},
                              total=float(total.detach()))
        trace.append(entry)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        sched.step()
        if callback is not None:
            callback(it, entry)

    with torch.no_grad():
        output = to_numpy(net(x))
    manifest = {
        "prompt": asdict(prompt),
        "training": asdict(config),
        "training_hash": config_hash(asdict(config)),
        "seed": config.seed,
        "iterations": config.iterations,
        "mask": mask.provenance(),
        "backend": getattr(backends, "kind", None),
        "warnings": warnings,
        "wall_time_s": round(time.time() - start_time, 3),
        "torch": torch.__version__,
        "platform": platform.platform(),
    }
    if run_config is not None:
        manifest["config"] = run_config
        manifest["config_hash"] = run_config_hash(run_config)
    if trace:
        manifest["initial_total"] = trace[0].total
        manifest["final_total"] = trace[-1].total
    return StylizationResult(output, mask, trace, manifest)

