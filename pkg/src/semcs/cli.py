"""Command-line entry point: ``semcs {stylize,segment,corpus,report}``.

Exit codes: 0 success, 2 bad input, 3 configuration problem, 4 numerical
abort. The resolved configuration is echoed to stderr before any work.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from .config import RunConfig, resolve_config
from .errors import InputError, NumericalError, SemcsError

log = logging.getLogger("semcs")

# flag dest -> dotted config key
_OVERRIDES = {
    "out": "out",
    "backend": "backend",
    "size": "image_size",
    "iterations": "training.iterations",
    "lr": "training.learning_rate",
    "seed": "training.seed",
    "lambda_fg": "training.weights.lambda_fg",
    "lambda_bg": "training.weights.lambda_bg",
    "lambda_content": "training.weights.lambda_content",
    "lambda_tv": "training.weights.lambda_tv",
    "lambda_patch": "training.weights.lambda_patch",
    "lambda_knn": "segmentation.lambda_knn",
    "knn_k": "segmentation.knn_k",
    "top_k": "eval.top_k",
}


def _common(p: argparse.ArgumentParser, training: bool = True, segmentation: bool = True) -> None:
    p.add_argument("--config", help="YAML/JSON config file or a previous run manifest")
    p.add_argument("--out", help="output directory")
    p.add_argument("--backend", choices=["pretrained", "seeded"],
                   help="model weights: pretrained files or deterministic seeded stand-ins")
    p.add_argument("--size", type=int, help="resize content images to SIZE x SIZE")
    p.add_argument("-v", "--verbose", action="store_true")
    if segmentation:
        g = p.add_argument_group("segmentation")
        g.add_argument("--lambda-knn", type=float, help="weight of the colour/position KNN affinity")
        g.add_argument("--knn-k", type=int, help="neighbours per patch in the KNN affinity")
    if training:
        g = p.add_argument_group("optimisation")
        g.add_argument("--iterations", type=int, help="optimisation steps per image")
        g.add_argument("--lr", type=float, help="Adam learning rate")
        g.add_argument("--seed", type=int, help="random seed")
        g.add_argument("--lambda-fg", type=float, help="foreground directional-loss weight")
        g.add_argument("--lambda-bg", type=float, help="background directional-loss weight")
        g.add_argument("--lambda-content", type=float, help="content-loss weight")
        g.add_argument("--lambda-tv", type=float, help="total-variation weight")
        g.add_argument("--lambda-patch", type=float, help="patch directional-loss weight")


def build_parser() -> argparse.ArgumentParser:
    # argparse exits with 2 on usage errors, which matches the input-error code
    parser = argparse.ArgumentParser(prog="semcs", description="Text-guided semantic style transfer.",
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stylize", help="stylize one image")
    p.add_argument("--content", required=True, help="content image path")
    p.add_argument("--text", required=True, help='style text, "fg" or "fg||bg"')
    p.add_argument("--mask", help="use this mask PNG instead of computing one")
    _common(p)

    p = sub.add_parser("segment", help="compute the salient-object mask only")
    p.add_argument("--content", required=True, help="content image path")
    _common(p, training=False)

    p = sub.add_parser("corpus", help="run and score a grid of jobs")
    p.add_argument("spec", help="corpus spec (YAML/JSON)")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.add_argument("--resume", action="store_true", help="skip jobs already done")
    p.add_argument("--top-k", type=int, help="number of outputs averaged in the report")
    _common(p)

    p = sub.add_parser("report", help="aggregate existing scores")
    p.add_argument("scores", help="scores JSON/JSONL or a corpus manifest.jsonl")
    p.add_argument("--top-k", type=int, help="number of outputs averaged (default 100)")
    p.add_argument("--rule", default="nima_desc", choices=["nima_desc", "dists_asc"],
                   help="selection rule for the top-k subset")
    p.add_argument("--out", help="report JSON path (CSV written alongside)")
    p.add_argument("--config", help="YAML/JSON config file")
    p.add_argument("-v", "--verbose", action="store_true")

    lines = ["flags per command:"]
    for name, sp in sub.choices.items():
        flags = [o for a in sp._actions for o in a.option_strings if o.startswith("--") and o != "--help"]
        lines.append(f"  {name}: " + " ".join(flags))
    lines.append("\nexit codes: 0 ok, 2 input error, 3 configuration error, 4 numerical abort")
    lines.append("weights: relative paths resolve under $SEMCS_WEIGHTS_DIR")
    parser.epilog = "\n".join(lines)
    return parser


def _resolve(args) -> RunConfig:
    overrides = {key: getattr(args, dest) for dest, key in _OVERRIDES.items()
                 if getattr(args, dest, None) is not None}
    config = resolve_config(args.config, overrides)
    print("resolved config " + config.hash() + ":\n" + json.dumps(config.to_dict(), indent=2),
          file=sys.stderr)
    return config


def _load(config: RunConfig, path: str):
    from .imaging import load_image

    return load_image(path, config.image_size)


def cmd_stylize(args) -> int:
    from .backends import Backends
    from .errors import DegenerateSegmentationError
    from .segmentation import SaliencyMask, load_mask, segment_image
    from .stylizer import parse_style_text, stylize

    config = _resolve(args)
    prompt = parse_style_text(args.text)
    image = _load(config, args.content)
    backends = Backends(config)
    if args.mask:
        mask = load_mask(args.mask)
    else:
        try:
            mask = segment_image(image, backends.feature_extractor, config.segmentation)
        except DegenerateSegmentationError as exc:
            log.warning("segmentation degenerate (%s); using the whole image", exc)
            mask = SaliencyMask.full(image.shape[:2])

    def report(i, entry):
        if i % 20 == 0 or i == config.training.iterations - 1:
            log.info("iter %4d total %.5f", i, entry.total)

    result = stylize(image, prompt, mask, config.training, backends,
                     run_config=config.to_dict(), callback=report)
    result.manifest["content"] = str(args.content)
    paths = result.save(config.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


def cmd_segment(args) -> int:
    from .backends import Backends
    from .segmentation import save_mask, segment_image

    config = _resolve(args)
    image = _load(config, args.content)
    mask = segment_image(image, Backends(config).feature_extractor, config.segmentation)
    out = Path(config.out)
    png, sidecar = save_mask(mask, out / "mask.png")
    meta = json.loads(sidecar.read_text())
    meta.update(content=str(args.content), config=config.to_dict(), config_hash=config.hash(),
                foreground_fraction=float(mask.pixels.mean()))
    sidecar.write_text(json.dumps(meta, indent=2))
    print(json.dumps({"mask": str(png), "provenance": str(sidecar)}))
    return 0


def cmd_corpus(args) -> int:
    from .corpus import MANIFEST_NAME, CorpusSpec, corpus_report, expand_grid, read_manifest, run_jobs

    config = _resolve(args)
    spec = CorpusSpec.from_file(args.spec)
    if args.out:
        spec.output_root = args.out
    manifest = Path(spec.output_root) / MANIFEST_NAME
    if manifest.exists() and read_manifest(manifest) and not args.resume:
        raise InputError(f"{manifest} already has jobs; pass --resume or choose another --out")
    jobs = expand_grid(spec, config.hash())
    log.info("%d jobs (%s)", len(jobs), spec.pairing)
    start = time.time()
    done = run_jobs(jobs, args.workers, config, manifest,
                    progress=lambda r: log.info("%s %s", r.status, r.job_id))
    n_done = sum(j.status == "done" for j in done)
    log.info("%d/%d jobs done in %.1fs", n_done, len(jobs), time.time() - start)
    if n_done == 0:
        raise InputError("no job finished; nothing to report")
    top_k = min(config.eval.top_k, n_done)
    report = corpus_report(done, top_k)
    report.extra["requested_top_k"] = config.eval.top_k
    root = Path(spec.output_root)
    report.write(root / "report.json", root / "report.csv")
    if n_done < len(jobs):
        log.warning("%d jobs failed; see %s", len(jobs) - n_done, manifest)
    print(json.dumps({"report": str(root / "report.json"), "done": n_done, "jobs": len(jobs)}))
    return 0


def cmd_report(args) -> int:
    from .evaluation import aggregate_report, load_scores

    config = _resolve(args)
    scores = load_scores(args.scores)
    source_hash = hashlib.sha256(Path(args.scores).read_bytes()).hexdigest()[:16]
    report = aggregate_report(scores, config.eval.top_k, rule=args.rule,
                              corpus_manifest_hash=source_hash)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        out = Path(args.out)
        report.write(out, out.with_suffix(".csv"))
    print(text)
    return 0


COMMANDS = {"stylize": cmd_stylize, "segment": cmd_segment, "corpus": cmd_corpus,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"semcs: numerical error: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print("diagnostics: " + json.dumps(exc.diagnostics, default=str), file=sys.stderr)
        return exc.exit_code
    except SemcsError as exc:
        print(f"semcs: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
