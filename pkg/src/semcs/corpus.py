"""Corpus runs: grids of (content image, style prompt) jobs.

Job records live in an append-only JSON-lines manifest under the output
root. Only the parent process writes to it; workers return updated
records. The newest record for a ``job_id`` is its current state, so a
rerun with ``resume`` skips everything already ``done``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import multiprocessing
import os
import shutil
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Iterable, Sequence

import yaml

from .config import RunConfig, _build, config_hash
from .errors import ConfigurationError, DegenerateSegmentationError, InputError, SemcsError
from .evaluation import QualityReport, QualityScore, aggregate_report

log = logging.getLogger(__name__)

PAIRINGS = ("single_grid", "double_grid")
STATUSES = ("pending", "done", "failed")
MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class StyleText:
    text: str
    category: str = ""


@dataclass
class CorpusSpec:
    content_paths: list[str]
    style_texts: list[StyleText]
    pairing: str = "single_grid"
    output_root: str = "corpus_out"

    def __post_init__(self):
        self.content_paths = [str(p) for p in self.content_paths]
        self.style_texts = [t if isinstance(t, StyleText)
                            else StyleText(**t) if isinstance(t, dict) else StyleText(str(t))
                            for t in self.style_texts]
        if not self.content_paths or not self.style_texts:
            raise InputError("corpus needs at least one content image and one style text")
        if self.pairing not in PAIRINGS:
            raise InputError(f"pairing must be one of {PAIRINGS}, got {self.pairing!r}")
        ids = self.content_ids
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise InputError(f"duplicate content ids: {dup}")
        texts = [t.text.strip() for t in self.style_texts]
        if not all(texts):
            raise InputError("style texts must be non-empty")
        if "||" in "".join(texts):
            raise InputError("style texts may not contain the '||' delimiter")
        if len(set(texts)) != len(texts):
            raise InputError("duplicate style texts")

    @property
    def content_ids(self) -> list[str]:
        return [Path(p).stem for p in self.content_paths]

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "CorpusSpec":
        """Load from YAML/JSON. Relative content paths and output roots are
        taken relative to the spec file."""
        path = Path(path)
        if not path.exists():
            raise InputError(f"corpus spec not found: {path}")
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise InputError(f"cannot parse corpus spec {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise InputError(f"corpus spec {path} must hold a mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown corpus spec keys: {sorted(unknown)}")
        base = path.parent
        data["content_paths"] = [str(base / p) for p in data.get("content_paths", [])]
        if "output_root" in data:
            data["output_root"] = str(base / data["output_root"])
        return cls(**data)


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode()).hexdigest()[:12]


def job_seed(job_id: str) -> int:
    return int(hashlib.sha256(job_id.encode()).hexdigest(), 16) % 2**31


@dataclass
class JobManifest:
    job_id: str
    content_id: str
    content_path: str
    prompt: str
    config_hash: str
    output_path: str
    seed: int
    status: str = "pending"
    categories: list[str] = field(default_factory=list)
    message: str = ""
    dists: float | None = None
    nima: float | None = None
    initial_total: float | None = None
    final_total: float | None = None

    def finish(self, status: str, **fields) -> "JobManifest":
        """Return the record moved from ``pending`` to ``done``/``failed``."""
        if self.status != "pending":
            raise InputError(f"job {self.job_id} is {self.status}; only pending jobs can finish")
        if status not in ("done", "failed"):
            raise InputError(f"bad terminal status {status!r}")
        return dataclasses.replace(self, status=status, **fields)

    def retry(self) -> "JobManifest":
        """A fresh pending attempt of a failed job."""
        if self.status == "done":
            raise InputError(f"job {self.job_id} is done")
        return dataclasses.replace(self, status="pending", message="", dists=None, nima=None,
                                   initial_total=None, final_total=None)


def expand_grid(spec: CorpusSpec, run_config_hash: str = "") -> list[JobManifest]:
    """Single grid: one job per (image, text). Double grid: one job per
    image and ordered (foreground, background) text pair, repeats included."""
    texts = spec.style_texts
    if spec.pairing == "single_grid":
        prompts = [(t.text.strip(), [t.category]) for t in texts]
    else:
        prompts = [(f"{a.text.strip()}||{b.text.strip()}", [a.category, b.category])
                   for a, b in product(texts, repeat=2)]
    root = Path(spec.output_root)
    jobs = []
    for cid, cpath in zip(spec.content_ids, spec.content_paths):
        for prompt, cats in prompts:
            ph = prompt_hash(prompt)
            job_id = f"{cid}/{ph}"
            jobs.append(JobManifest(job_id, cid, cpath, prompt, run_config_hash,
                                    str(root / cid / ph), job_seed(job_id), categories=cats))
    return jobs


def grid_size(n_images: int, n_texts: int, pairing: str) -> int:
    return n_images * (n_texts if pairing == "single_grid" else n_texts ** 2)


# ---------------------------------------------------------------- manifest I/O

def read_manifest(path: str | os.PathLike) -> dict[str, JobManifest]:
    """Latest record per job id."""
    path = Path(path)
    latest: dict[str, JobManifest] = {}
    if not path.exists():
        return latest
    names = {f.name for f in dataclasses.fields(JobManifest)}
    for line in path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            latest[rec["job_id"]] = JobManifest(**{k: v for k, v in rec.items() if k in names})
    return latest


def append_records(path: str | os.PathLike, records: Iterable[JobManifest]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        for rec in records:
            fh.write(json.dumps(dataclasses.asdict(rec), sort_keys=True) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def manifest_hash(jobs: Sequence[JobManifest]) -> str:
    """Content hash of the job set, independent of record order."""
    recs = sorted((dataclasses.asdict(j) for j in jobs), key=lambda r: r["job_id"])
    return config_hash({"jobs": recs})


# ---------------------------------------------------------------- execution

_BACKENDS: dict[str, object] = {}


def _backends_for(config: RunConfig):
    from .backends import Backends

    key = config.hash()
    if key not in _BACKENDS:
        _BACKENDS[key] = Backends(config)
    return _BACKENDS[key]


def run_one(job: JobManifest, config_dict: dict, evaluate: bool = True) -> JobManifest:
    """Segment, stylize, save and score one job. Errors from the job itself
    come back as a ``failed`` record; nothing is raised."""
    from .evaluation import compute_dists, compute_nima
    from .imaging import load_image
    from .segmentation import SaliencyMask, segment_image
    from .stylizer import parse_style_text, stylize

    try:
        config = _build(RunConfig, config_dict)
        backends = _backends_for(config)
        image = load_image(job.content_path, config.image_size)
        try:
            mask = segment_image(image, backends.feature_extractor, config.segmentation)
        except DegenerateSegmentationError:
            mask = SaliencyMask.full(image.shape[:2])
        training = dataclasses.replace(config.training, seed=job.seed)
        result = stylize(image, parse_style_text(job.prompt), mask, training, backends,
                         run_config=config_dict)
        result.manifest["job_id"] = job.job_id
        scores = {}
        if evaluate:
            scores = {"dists": compute_dists(result.output_image, image, backends.dists),
                      "nima": compute_nima(result.output_image, backends.nima)}
        out = Path(job.output_path)
        tmp = out.with_name(out.name + ".partial")
        shutil.rmtree(tmp, ignore_errors=True)
        result.save(tmp)
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
        return job.finish("done", initial_total=result.manifest.get("initial_total"),
                          final_total=result.manifest.get("final_total"), **scores)
    except SemcsError as exc:
        return job.finish("failed", message=f"{type(exc).__name__}: {exc}")
    except Exception as exc:  # noqa: BLE001 - recorded, never swallowed silently
        log.debug("job %s crashed", job.job_id, exc_info=True)
        return job.finish("failed", message=f"{type(exc).__name__}: {exc}\n"
                                            f"{traceback.format_exc(limit=3)}")


def _init_worker(threads: int) -> None:
    import torch

    torch.set_num_threads(threads)


def run_jobs(manifests: Sequence[JobManifest], worker_count: int, config: RunConfig,
             manifest_path: str | os.PathLike, evaluate: bool = True,
             progress=None) -> list[JobManifest]:
    """Run every job that is not already ``done`` in ``manifest_path``.

    Returns the current record of every input job, in input order.
    """
    if worker_count < 1:
        raise ConfigurationError("worker_count must be >= 1")
    config_dict = config.to_dict()
    existing = read_manifest(manifest_path)
    current: dict[str, JobManifest] = {}
    todo: list[JobManifest] = []
    for job in manifests:
        prev = existing.get(job.job_id)
        if prev is not None and prev.status == "done":
            current[job.job_id] = prev
            continue
        fresh = job if job.status == "pending" else job.retry()
        current[job.job_id] = fresh
        todo.append(fresh)
    append_records(manifest_path, todo)

    def finish(rec: JobManifest):
        append_records(manifest_path, [rec])
        current[rec.job_id] = rec
        if rec.status == "failed":
            log.warning("job %s failed: %s", rec.job_id, rec.message.splitlines()[0])
        if progress is not None:
            progress(rec)

    if worker_count == 1 or len(todo) <= 1:
        for job in todo:
            finish(run_one(job, config_dict, evaluate))
    else:
        import torch

        threads = max(1, torch.get_num_threads() // worker_count)
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(worker_count, mp_context=ctx, initializer=_init_worker,
                                 initargs=(threads,)) as pool:
            futures = [pool.submit(run_one, job, config_dict, evaluate) for job in todo]
            for fut in as_completed(futures):
                finish(fut.result())
    return [current[j.job_id] for j in manifests]


def corpus_report(jobs: Sequence[JobManifest], top_k: int) -> QualityReport:
    scores = [QualityScore(j.job_id, j.dists, j.nima) for j in jobs
              if j.status == "done" and j.dists is not None]
    report = aggregate_report(scores, top_k, corpus_manifest_hash=manifest_hash(jobs))
    report.extra = {"n_jobs": len(jobs),
                    "n_failed": sum(j.status == "failed" for j in jobs)}
    return report
