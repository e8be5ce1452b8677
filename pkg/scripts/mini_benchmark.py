"""Mini-benchmark: 5 synthetic scenes x 2 style texts through the corpus
harness, then DISTS/NIMA aggregation over all 10 outputs.

    python scripts/mini_benchmark.py [--iterations 50] [--out bench_out]

Uses pretrained backends when $SEMCS_WEIGHTS_DIR is set, otherwise the
seeded stand-ins (whose NIMA head is near-uniform, so NIMA sits near 5.5
regardless of the image).
"""

import argparse
import json
import os
import shutil
import sys
import time
from pathlib import Path

from semcs.config import resolve_config
from semcs.corpus import CorpusSpec, corpus_report, expand_grid, run_jobs

SCENES = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "scenes"
TEXTS = ["Desert Sand", "Starry Night by Vincent Van Gogh"]
DISTS_RANGE = (0.2, 0.55)
NIMA_RANGE = (4.0, 6.6)


def benchmark(out: Path, iterations: int = 50, n_images: int = 5, workers: int = 1,
              backend: str | None = None, log=print) -> dict:
    backend = backend or ("pretrained" if os.environ.get("SEMCS_WEIGHTS_DIR") else "seeded")
    config = resolve_config(overrides={"backend": backend, "training.iterations": iterations})
    spec = CorpusSpec(sorted(str(p) for p in SCENES.glob("*.png"))[:n_images], TEXTS,
                      "single_grid", str(out))
    jobs = expand_grid(spec, config.hash())
    start = time.perf_counter()
    done = run_jobs(jobs, workers, config, out / "manifest.jsonl",
                    progress=lambda r: log(f"{r.status} {r.job_id} dists={r.dists} nima={r.nima}"))
    report = corpus_report(done, len(jobs))
    report.extra.update(backend=backend, iterations=iterations,
                        wall_time_s=round(time.perf_counter() - start, 1))
    report.write(out / "report.json", out / "report.csv")
    return report.to_dict()


def in_ranges(report: dict) -> bool:
    return (DISTS_RANGE[0] <= report["mean_dists"] <= DISTS_RANGE[1]
            and NIMA_RANGE[0] <= report["mean_nima"] <= NIMA_RANGE[1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--iterations", type=int, default=50)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--backend", choices=["pretrained", "seeded"])
    ap.add_argument("--out", type=Path, default=Path("bench_out"))
    ap.add_argument("--fresh", action="store_true", help="delete --out first")
    args = ap.parse_args(argv)
    if args.fresh:
        shutil.rmtree(args.out, ignore_errors=True)
    report = benchmark(args.out, args.iterations, workers=args.workers, backend=args.backend)
    print(json.dumps({k: report[k] for k in ("mean_dists", "mean_nima", "top_k", "backend",
                                             "iterations", "wall_time_s")}, indent=2))
    return 0 if in_ranges(report) else 1


if __name__ == "__main__":
    sys.exit(main())
