"""Regenerate tests/fixtures: ten synthetic scenes, the 224x224 smoke
image and golden model outputs from the seeded backend.

    python scripts/make_fixtures.py [--out tests/fixtures]

Goldens are compared with a tolerance (not a checksum) because BLAS
kernels may differ in the last bits across machines.
"""

import argparse
import json
from pathlib import Path

import numpy as np
import torch

from semcs.backends import Backends
from semcs.config import RunConfig
from semcs.evaluation import compute_dists, compute_nima, nima_distribution
from semcs.imaging import load_image, save_image
from semcs.losses import encode_image, encode_text
from semcs.segmentation import extract_patch_features, segment_image
from semcs.synthetic import disc_scene, object_scene

N_SCENES = 10


def golden_values(fixtures: Path) -> dict[str, np.ndarray]:
    backends = Backends(RunConfig(backend="seeded"))
    img = load_image(fixtures / "fixture.png")
    other = load_image(fixtures / "scenes" / "scene_00.png")
    grid = extract_patch_features(img, backends.feature_extractor)
    mask, spectrum, _ = segment_image(img, backends.feature_extractor, return_spectrum=True)
    with torch.no_grad():
        text = encode_text("Desert Sand", backends.text_encoder).vector
        image = encode_image(img, backends.image_encoder).vector[0]
    return {
        "patch_features": grid.features,
        "eigenvalues": spectrum.eigenvalues,
        "fiedler": spectrum.eigenvectors[:, 1],
        "mask_grid": mask.grid_bits.astype(np.uint8),
        "text_desert_sand": text.numpy(),
        "image_fixture": image.numpy(),
        "dists_fixture_scene00": np.array(compute_dists(img, other, backends.dists)),
        "nima_fixture": np.array(compute_nima(img, backends.nima)),
        "nima_distribution_fixture": nima_distribution(img, backends.nima),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "tests" / "fixtures")
    args = ap.parse_args(argv)
    out = args.out
    (out / "scenes").mkdir(parents=True, exist_ok=True)

    img, disc = disc_scene(224)
    save_image(out / "fixture.png", img)
    save_image(out / "fixture_mask.png", np.repeat(disc[..., None], 3, axis=2).astype(np.float32))
    for i in range(N_SCENES):
        scene, _ = object_scene(224, seed=i)
        save_image(out / "scenes" / f"scene_{i:02d}.png", scene)

    torch.set_num_threads(1)
    values = golden_values(out)
    np.savez(out / "golden.npz", **values)
    meta = {"backend": "seeded", "backend_seed": 0, "torch": torch.__version__,
            "numpy": np.__version__, "keys": sorted(values)}
    (out / "golden.json").write_text(json.dumps(meta, indent=2))
    print(f"wrote {len(values)} golden arrays and {N_SCENES + 1} images to {out}")


if __name__ == "__main__":
    main()
