"""Quality scoring (DISTS, NIMA) and corpus-level aggregation.

The aggregation keeps the ``top_k`` outputs under an explicit, serialized
selection rule and averages their scores.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .backends.nima import NIMA_INPUT_SIZE
from .errors import InputError
from .imaging import check_image, to_tensor

SELECTION_RULES = {
    "nima_desc": "rank by NIMA descending, ties by image_id ascending",
    "dists_asc": "rank by DISTS ascending, ties by image_id ascending",
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["selection", "top_k", "mean_dists", "mean_nima", "per_image"],
    "properties": {
        "selection": {"type": "object", "required": ["rule", "description", "reference"]},
        "top_k": {"type": "integer", "minimum": 1},
        "mean_dists": {"type": "number", "minimum": 0, "maximum": 1},
        "mean_nima": {"type": "number", "minimum": 1, "maximum": 10},
        "n_scored": {"type": "integer"},
        "corpus_manifest_hash": {"type": "string"},
        "per_image": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["image_id", "dists", "nima"],
                "properties": {
                    "image_id": {"type": "string"},
                    "dists": {"type": "number", "minimum": 0, "maximum": 1},
                    "nima": {"type": "number", "minimum": 1, "maximum": 10},
                },
            },
        },
    },
}


@dataclass(frozen=True)
class QualityScore:
    image_id: str
    dists: float
    nima: float

    def __post_init__(self):
        if not (math.isfinite(self.dists) and 0.0 <= self.dists <= 1.0):
            raise InputError(f"{self.image_id}: DISTS {self.dists} outside [0, 1]")
        if not (math.isfinite(self.nima) and 1.0 <= self.nima <= 10.0):
            raise InputError(f"{self.image_id}: NIMA {self.nima} outside [1, 10]")


@dataclass
class QualityReport:
    per_image: list[QualityScore]
    mean_dists: float
    mean_nima: float
    top_k: int
    selection: dict
    n_scored: int
    corpus_manifest_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "selection": self.selection,
            "top_k": self.top_k,
            "mean_dists": self.mean_dists,
            "mean_nima": self.mean_nima,
            "n_scored": self.n_scored,
            "corpus_manifest_hash": self.corpus_manifest_hash,
            "per_image": [asdict(s) for s in self.per_image],
        }
        out.update(self.extra)
        return out

    def write(self, path: str | os.PathLike, csv_path: str | os.PathLike | None = None) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["rank", "image_id", "dists", "nima"])
                for rank, s in enumerate(self.per_image, 1):
                    writer.writerow([rank, s.image_id, repr(s.dists), repr(s.nima)])
                writer.writerow(["mean", "", repr(self.mean_dists), repr(self.mean_nima)])


# ---------------------------------------------------------------- metrics

def _double_batch(image) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        return to_tensor(check_image(image), torch.float64)
    x = image if image.dim() == 4 else image.unsqueeze(0)
    return x.to(torch.float64)


@torch.no_grad()
def compute_dists(output, reference, scorer) -> float:
    """Full-reference DISTS distance, clipped to [0, 1]; 0 for identical images."""
    x, y = _double_batch(output), _double_batch(reference)
    if x.shape != y.shape:
        raise InputError(f"DISTS needs equal resolutions, got {tuple(x.shape)} and {tuple(y.shape)}")
    param = next(scorer.parameters(), None)
    dtype = param.dtype if param is not None else torch.float64
    d = float(scorer(x.to(dtype), y.to(dtype))[0])
    return min(1.0, max(0.0, d))


@torch.no_grad()
def nima_distribution(output, scorer) -> np.ndarray:
    x = _double_batch(output).float()
    if tuple(x.shape[-2:]) != (NIMA_INPUT_SIZE, NIMA_INPUT_SIZE):
        x = F.interpolate(x, size=(NIMA_INPUT_SIZE, NIMA_INPUT_SIZE), mode="bilinear",
                          align_corners=False, antialias=True)
    return scorer(x)[0].double().numpy()


def compute_nima(output, scorer) -> float:
    """Mean of the predicted distribution over rating bins 1..10."""
    probs = nima_distribution(output, scorer)
    return float(np.dot(np.arange(1, 11), probs) / probs.sum())


# ---------------------------------------------------------------- aggregation

def _ranking_key(rule: str):
    if rule == "nima_desc":
        return lambda s: (-s.nima, s.image_id)
    if rule == "dists_asc":
        return lambda s: (s.dists, s.image_id)
    raise InputError(f"unknown selection rule {rule!r}; choose from {sorted(SELECTION_RULES)}")


def aggregate_report(scores: Iterable[QualityScore], top_k: int, rule: str = "nima_desc",
                     corpus_manifest_hash: str = "",
                     reference: str = "content image") -> QualityReport:
    """Select ``top_k`` scores under ``rule`` and average them.

    Means use ``math.fsum``, so they do not depend on input order.
    """
    scores = list(scores)
    if not scores:
        raise InputError("no scores to aggregate")
    if not 1 <= top_k <= len(scores):
        raise InputError(f"top_k={top_k} but only {len(scores)} scores available")
    ids = [s.image_id for s in scores]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate image ids in scores")
    chosen = sorted(scores, key=_ranking_key(rule))[:top_k]
    return QualityReport(
        per_image=chosen,
        mean_dists=math.fsum(s.dists for s in chosen) / top_k,
        mean_nima=math.fsum(s.nima for s in chosen) / top_k,
        top_k=top_k,
        selection={"rule": rule, "description": SELECTION_RULES[rule], "reference": reference},
        n_scored=len(scores),
        corpus_manifest_hash=corpus_manifest_hash,
    )


def load_scores(path: str | os.PathLike) -> list[QualityScore]:
    """Read scores from a JSON list, a report (``per_image``) or JSON lines.
    JSON-lines records without scores (e.g. failed jobs) are skipped."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"scores file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text)
        records = data["per_image"] if isinstance(data, dict) else data
    except json.JSONDecodeError:
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
    latest = {}
    for rec in records:
        if "dists" in rec and "nima" in rec and rec["dists"] is not None:
            key = rec.get("image_id") or rec.get("job_id")
            latest[key] = QualityScore(str(key), float(rec["dists"]), float(rec["nima"]))
    return list(latest.values())
