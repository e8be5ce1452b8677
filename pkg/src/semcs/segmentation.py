"""Unsupervised salient-object masks from a spectral bipartition.

Pipeline: ViT patch features -> thresholded feature affinity, plus a
sparse KNN colour/position affinity -> graph Laplacian -> Fiedler vector ->
binary mask at image resolution.
"""

from __future__ import annotations

import colorsys
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse
import torch
import torch.nn.functional as F
from PIL import Image

from .config import SegmentationConfig
from .errors import DegenerateSegmentationError, InputError, NumericalError
from .imaging import check_image, to_tensor

log = logging.getLogger(__name__)

LAPLACIAN_KINDS = ("symmetric", "unnormalized")
SYMMETRY_TOL = 1e-9


@dataclass
class PatchFeatureGrid:
    features: np.ndarray
    grid_shape: tuple[int, int]
    patch_size: int
    source_resolution: tuple[int, int]
    original_resolution: tuple[int, int] | None = None

    def __post_init__(self):
        rows, cols = self.grid_shape
        if self.features.shape[0] != rows * cols:
            raise InputError(
                f"{self.features.shape[0]} feature rows for a {rows}x{cols} grid")
        if not np.all(np.isfinite(self.features)):
            raise InputError("patch features contain non-finite values")

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass
class AffinityMatrix:
    weights: np.ndarray | scipy.sparse.spmatrix
    kind: str

    @property
    def shape(self):
        return self.weights.shape

    def dense(self) -> np.ndarray:
        w = self.weights
        return w.toarray() if scipy.sparse.issparse(w) else np.asarray(w)


@dataclass
class AffinitySpectrum:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # (n, count), column i pairs with eigenvalues[i]
    laplacian_kind: str

    def __len__(self):
        return len(self.eigenvalues)


@dataclass
class ColorDescriptorField:
    descriptors: np.ndarray  # (n, 5): h, s, v, row, col, all in [0, 1]


@dataclass
class SaliencyMask:
    pixels: np.ndarray  # (H, W) uint8 in {0, 1}
    eigen_index: int = 1
    threshold: float = 0.0
    flipped: bool = False
    grid_shape: tuple[int, int] | None = None
    degenerate: bool = False
    grid_bits: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def full(cls, shape: tuple[int, int]) -> "SaliencyMask":
        return cls(np.ones(shape, dtype=np.uint8), eigen_index=-1, degenerate=True)

    @property
    def shape(self):
        return self.pixels.shape

    def provenance(self) -> dict:
        return {
            "eigen_index": self.eigen_index,
            "threshold": self.threshold,
            "flipped": self.flipped,
            "grid_shape": list(self.grid_shape) if self.grid_shape else None,
            "degenerate": self.degenerate,
        }


# ---------------------------------------------------------------- features

def prepare_for_backbone(image: np.ndarray, patch_size: int, mode: str = "resize") -> torch.Tensor:
    """Bring an image to a patch-aligned resolution.

    ``resize`` shrinks each side to the nearest multiple of the patch size
    (at least one patch), ``pad`` zero-pads bottom/right up to the next
    multiple, ``strict`` refuses misaligned input.
    """
    x = to_tensor(image)
    H, W = x.shape[-2:]
    if H % patch_size == 0 and W % patch_size == 0:
        return x
    if mode == "strict":
        raise InputError(f"{H}x{W} is not divisible by patch size {patch_size}")
    if mode == "resize":
        size = (max(patch_size, H // patch_size * patch_size),
                max(patch_size, W // patch_size * patch_size))
        return F.interpolate(x, size=size, mode="bilinear", align_corners=False, antialias=True)
    if mode == "pad":
        ph, pw = -H % patch_size, -W % patch_size
        return F.pad(x, (0, pw, 0, ph))
    raise InputError(f"unknown input mode {mode!r}")


def extract_patch_features(image: np.ndarray, backbone, mode: str = "resize",
                           normalize: bool = True) -> PatchFeatureGrid:
    """One feature row per patch token of the backbone's last block.

    Rows are L2-normalised when ``normalize`` so that the affinity
    ``f f^T`` is a cosine similarity.
    """
    image = check_image(image)
    x = prepare_for_backbone(image, backbone.patch_size, mode)
    feats, grid = backbone(x)
    feats = feats.double().numpy()
    if normalize:
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = feats / np.maximum(norms, 1e-12)
    return PatchFeatureGrid(
        features=feats,
        grid_shape=tuple(grid),
        patch_size=backbone.patch_size,
        source_resolution=tuple(x.shape[-2:]),
        original_resolution=image.shape[:2],
    )


# ---------------------------------------------------------------- affinities

def build_feature_affinity(features: PatchFeatureGrid | np.ndarray) -> AffinityMatrix:
    f = features.features if isinstance(features, PatchFeatureGrid) else np.asarray(features, float)
    if not np.all(np.isfinite(f)):
        raise InputError("features contain non-finite values")
    gram = f @ f.T
    w = np.maximum(gram, 0.0)
    w = 0.5 * (w + w.T)  # kill matmul round-off asymmetry
    return AffinityMatrix(w, "feature")


def color_descriptors(image: np.ndarray, grid_shape: tuple[int, int]) -> ColorDescriptorField:
    """Mean colour of each patch in HSV plus its normalised grid position."""
    image = check_image(image)
    rows, cols = grid_shape
    x = to_tensor(image, torch.float64)
    pooled = F.adaptive_avg_pool2d(x, (rows, cols))[0].permute(1, 2, 0).reshape(-1, 3).numpy()
    hsv = np.array([colorsys.rgb_to_hsv(*np.clip(p, 0.0, 1.0)) for p in pooled])
    r, c = np.divmod(np.arange(rows * cols), cols)
    r = r / (rows - 1) if rows > 1 else np.zeros_like(r, dtype=float)
    c = c / (cols - 1) if cols > 1 else np.zeros_like(c, dtype=float)
    return ColorDescriptorField(np.column_stack([hsv, r, c]))


def knn_indices(desc: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    """k nearest neighbours of every row (itself excluded). Ties go to the
    lower index, so the result does not depend on a tree's traversal order."""
    n = desc.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        d2 = ((desc[lo:hi, None, :] - desc[None, :, :]) ** 2).sum(-1)
        d2[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        out[lo:hi] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def build_color_affinity(image: np.ndarray, grid_shape: tuple[int, int], k: int = 7,
                         descriptors: ColorDescriptorField | None = None) -> AffinityMatrix:
    """Sparse KNN-matting kernel ``1 - ||psi(u) - psi(v)||`` clamped to [0, 1],
    then symmetrised with an element-wise max."""
    if descriptors is None:
        descriptors = color_descriptors(image, grid_shape)
    desc = descriptors.descriptors
    n = desc.shape[0]
    if not 1 <= k < n:
        raise InputError(f"knn k must satisfy 1 <= k < {n}, got {k}")
    nbrs = knn_indices(desc, k)
    rows = np.repeat(np.arange(n), k)
    cols = nbrs.ravel()
    dist = np.sqrt(((desc[rows] - desc[cols]) ** 2).sum(-1))
    vals = np.clip(1.0 - dist, 0.0, 1.0)
    w = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    w = w.maximum(w.T).tocsr()
    w.eliminate_zeros()
    return AffinityMatrix(w, "color")


def combine_affinity(w_feat: AffinityMatrix, w_knn: AffinityMatrix,
                     lambda_knn: float) -> AffinityMatrix:
    if w_feat.shape != w_knn.shape:
        raise InputError(f"affinity shapes differ: {w_feat.shape} vs {w_knn.shape}")
    if not lambda_knn >= 0:
        raise InputError(f"lambda_knn must be >= 0, got {lambda_knn}")
    return AffinityMatrix(w_feat.dense() + lambda_knn * w_knn.dense(), "fused")


# ---------------------------------------------------------------- spectrum

def _check_affinity(w: np.ndarray) -> np.ndarray:
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise InputError(f"affinity must be square, got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise InputError("affinity has non-finite entries")
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if np.abs(w - w.T).max(initial=0.0) > SYMMETRY_TOL * scale:
        raise InputError("affinity matrix is not symmetric")
    if w.min(initial=0.0) < 0:
        raise InputError("affinity matrix has negative entries")
    return 0.5 * (w + w.T)


def graph_laplacian(w: AffinityMatrix | np.ndarray, kind: str = "symmetric") -> np.ndarray:
    """``D - W``, or ``D^-1/2 (D - W) D^-1/2`` for ``kind="symmetric"``.
    Isolated nodes get a zero row either way, keeping one zero eigenvalue
    per connected component."""
    if kind not in LAPLACIAN_KINDS:
        raise InputError(f"laplacian kind must be one of {LAPLACIAN_KINDS}")
    w = _check_affinity(w.dense() if isinstance(w, AffinityMatrix) else np.asarray(w, float))
    deg = w.sum(axis=1)
    lap = np.diag(deg) - w
    if kind == "symmetric":
        inv = np.zeros_like(deg)
        nz = deg > 0
        inv[nz] = 1.0 / np.sqrt(deg[nz])
        lap = inv[:, None] * lap * inv[None, :]
    return lap


def _fix_signs(vecs: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    vecs = vecs.copy()
    for j in range(vecs.shape[1]):
        nz = np.flatnonzero(np.abs(vecs[:, j]) > tol)
        if nz.size and vecs[nz[0], j] < 0:
            vecs[:, j] = -vecs[:, j]
    return vecs


def laplacian_eigendecomposition(w: AffinityMatrix | np.ndarray, kind: str = "symmetric",
                                 count: int | None = None) -> AffinitySpectrum:
    """Smallest ``count`` eigenpairs of the graph Laplacian, ascending, with
    unit-norm eigenvectors whose first nonzero entry is positive."""
    lap = graph_laplacian(w, kind)
    n = lap.shape[0]
    count = n if count is None else count
    if not 1 <= count <= n:
        raise InputError(f"count must lie in [1, {n}], got {count}")
    try:
        vals, vecs = scipy.linalg.eigh(lap, subset_by_index=[0, count - 1])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError("eigensolver failed", {
            "n": n, "kind": kind, "count": count, "error": str(exc),
            "max_abs_entry": float(np.abs(lap).max(initial=0.0)),
        }) from exc
    vecs = vecs / np.linalg.norm(vecs, axis=0, keepdims=True)
    return AffinitySpectrum(vals, _fix_signs(vecs), kind)


# ---------------------------------------------------------------- mask

def border_cells(grid_shape: tuple[int, int]) -> np.ndarray:
    rows, cols = grid_shape
    b = np.zeros(grid_shape, dtype=bool)
    b[0, :] = b[-1, :] = True
    b[:, 0] = b[:, -1] = True
    return b


def upsample_nearest(grid: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    rows, cols = grid.shape
    H, W = target
    ri = np.arange(H) * rows // H
    ci = np.arange(W) * cols // W
    return grid[ri[:, None], ci[None, :]]


def upsample_soft(grid: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear float mask in [0, 1] for callers that want smooth region weights."""
    t = torch.from_numpy(grid.astype(np.float32))[None, None]
    return F.interpolate(t, size=tuple(target), mode="bilinear", align_corners=False)[0, 0].numpy()


ZERO_BAND = 1e-12


def _choose_foreground(y: np.ndarray, grid_shape: tuple[int, int]) -> tuple[np.ndarray, bool]:
    """Pick the positive or negative side of ``y`` as foreground.

    Rules in order: fewer border patches, then smaller area, then the side
    holding the first entry of largest magnitude. Every rule is symmetric
    under ``y -> -y`` so the chosen region never depends on the sign.
    """
    pos, neg = y > 0, y < 0
    border = border_cells(grid_shape).ravel()
    key_pos = (int((pos & border).sum()), int(pos.sum()))
    key_neg = (int((neg & border).sum()), int(neg.sum()))
    if key_pos != key_neg:
        use_neg = key_neg < key_pos
    else:
        use_neg = bool(neg[int(np.argmax(np.abs(y)))])
    return (neg if use_neg else pos), use_neg


def extract_salient_mask(spectrum: AffinitySpectrum, grid_shape: tuple[int, int],
                         target_resolution: tuple[int, int], eigen_index: int = 1,
                         threshold: float = 0.0) -> SaliencyMask:
    """Binarise the Fiedler vector at 0 and lift it to pixel resolution.

    Patches within ``ZERO_BAND * max|y|`` of the threshold fall in neither
    side and stay background; the band is relative so rescaling ``y`` (even
    into underflow) never moves a patch across it. When one side is empty
    the mask is all ones with the ``degenerate`` flag set.
    """
    if len(spectrum) <= eigen_index:
        raise InputError(f"spectrum has {len(spectrum)} eigenpairs, need > {eigen_index}")
    rows, cols = grid_shape
    y = np.asarray(spectrum.eigenvectors[:, eigen_index], dtype=float)
    if y.size != rows * cols:
        raise InputError(f"eigenvector length {y.size} does not fit grid {grid_shape}")
    if np.ptp(y) < 1e-10:
        raise DegenerateSegmentationError(
            "Fiedler vector is numerically constant",
            {"eigen_index": eigen_index, "range": float(np.ptp(y))})
    y = y - threshold
    y = np.where(np.abs(y) <= ZERO_BAND * np.abs(y).max(), 0.0, y)
    fg, flipped = _choose_foreground(y, grid_shape)
    degenerate = not (y > 0).any() or not (y < 0).any()
    bits = fg.reshape(rows, cols).astype(np.uint8)
    if degenerate:
        log.warning("Fiedler vector does not change sign; using the full image")
        bits = np.ones((rows, cols), dtype=np.uint8)
    pixels = upsample_nearest(bits, tuple(target_resolution)).astype(np.uint8)
    return SaliencyMask(pixels, eigen_index, float(threshold), bool(flipped),
                        (rows, cols), degenerate, bits)


def segment_image(image: np.ndarray, backbone, config: SegmentationConfig | None = None,
                  return_spectrum: bool = False):
    """Full salient-object phase for one image."""
    config = config or SegmentationConfig()
    image = check_image(image)
    grid = extract_patch_features(image, backbone, config.input_mode, config.normalize_features)
    if grid.n < 2:
        raise DegenerateSegmentationError(
            f"image gives a {grid.grid_shape[0]}x{grid.grid_shape[1]} patch grid; nothing to split",
            {"grid_shape": list(grid.grid_shape)})
    w = build_feature_affinity(grid)
    if config.lambda_knn > 0:
        # tiny grids have fewer than k other patches
        k = min(config.knn_k, grid.n - 1)
        w = combine_affinity(w, build_color_affinity(image, grid.grid_shape, k), config.lambda_knn)
    spectrum = laplacian_eigendecomposition(w, config.laplacian, count=min(grid.n, 3))
    mask = extract_salient_mask(spectrum, grid.grid_shape, image.shape[:2])
    return (mask, spectrum, grid) if return_spectrum else mask


def save_mask(mask: SaliencyMask, path: str | os.PathLike) -> tuple[Path, Path]:
    """Write an 8-bit PNG (0/255) and a ``.json`` provenance sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask.pixels * 255).astype(np.uint8), mode="L").save(path)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(mask.provenance(), indent=2))
    return path, sidecar


def load_mask(path: str | os.PathLike) -> SaliencyMask:
    path = Path(path)
    if not path.exists():
        raise InputError(f"mask not found: {path}")
    pixels = (np.asarray(Image.open(path).convert("L")) >= 128).astype(np.uint8)
    meta = {}
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    grid = meta.get("grid_shape")
    return SaliencyMask(pixels, meta.get("eigen_index", 1), meta.get("threshold", 0.0),
                        meta.get("flipped", False), tuple(grid) if grid else None,
                        meta.get("degenerate", False))
