"""End-to-end smoke run: 224x224 fixture, one prompt, default recipe
(200 iterations), run twice to check that the loss trace is bitwise
reproducible.

    python scripts/run_smoke.py [--text "Desert Sand"] [--out smoke_out]
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from semcs.backends import Backends
from semcs.config import resolve_config
from semcs.imaging import load_image
from semcs.segmentation import segment_image
from semcs.stylizer import parse_style_text, stylize

FIXTURE = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "fixture.png"


def smoke(text: str = "Desert Sand", runs: int = 2, overrides: dict | None = None,
          log=print) -> dict:
    config = resolve_config(overrides={"backend": "seeded", **(overrides or {})})
    backends = Backends(config)
    image = load_image(FIXTURE)
    mask = segment_image(image, backends.feature_extractor, config.segmentation)
    results, times = [], []
    for r in range(runs):
        start = time.perf_counter()
        res = stylize(image, parse_style_text(text), mask, config.training, backends,
                      run_config=config.to_dict(),
                      callback=lambda i, e: log(f"run {r} iter {i:3d} total {e.total:.5f}")
                      if i % 50 == 0 else None)
        times.append(time.perf_counter() - start)
        results.append(res)
    traces = [[json.dumps(e.record(i)) for i, e in enumerate(res.loss_trace)] for res in results]
    first = results[0]
    return {
        "iterations": config.training.iterations,
        "initial_total": first.loss_trace[0].total,
        "final_total": first.loss_trace[-1].total,
        "ratio": first.loss_trace[-1].total / first.loss_trace[0].total,
        "seconds_per_run": times,
        "bitwise_reproducible": all(t == traces[0] for t in traces)
        and all(np.array_equal(r.output_image, first.output_image) for r in results),
        "output_min": float(first.output_image.min()),
        "output_max": float(first.output_image.max()),
        "result": first,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--text", default="Desert Sand")
    ap.add_argument("--runs", type=int, default=2)
    ap.add_argument("--iterations", type=int)
    ap.add_argument("--out", type=Path, default=Path("smoke_out"))
    args = ap.parse_args(argv)
    overrides = {"training.iterations": args.iterations} if args.iterations else {}
    summary = smoke(args.text, args.runs, overrides)
    summary.pop("result").save(args.out)
    print(json.dumps(summary, indent=2))
    (args.out / "smoke_summary.json").write_text(json.dumps(summary, indent=2))
    ok = summary["ratio"] <= 0.8 and summary["bitwise_reproducible"]
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
