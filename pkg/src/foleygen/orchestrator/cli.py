"""Command-line entry point: ``foleygen <verb> --config run.yaml [--seed N]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from ..dataio import load_manifest, load_split
from ..errors import FoleyError
from ..synthetic import write_corpus
from .config import OUTPUT_RATE, load_config
from .pipeline import (
    Workspace,
    evaluate_run,
    generate_all,
    output_lock,
    run_log,
    run_pipeline,
    run_transfer_pipeline,
)

STAGE_VERBS = {
    "train-clap": "clap",
    "train-vae": "vae",
    "pretrain-ldm": "ldm_pretrain",
    "finetune-ldm": "ldm_finetune",
}


def _ingest(cfg, ws: Workspace) -> dict:
    summary = {}
    for split in ("train", "pretrain", "reference"):
        path = ws.manifest_path(split)
        if path is None:
            continue
        manifest = load_manifest(path, n_classes=len(ws.labels))
        seconds = cfg.data.pretrain_clip_seconds if split == "pretrain" else cfg.data.clip_seconds
        clips = load_split(manifest, OUTPUT_RATE, seconds, ws.labels)
        counts = Counter(c.label.name if c.label else "<caption>" for c in clips)
        lengths = {len(c.samples) for c in clips}
        summary[split] = {"manifest": str(path), "clips": len(clips), "per_class": dict(sorted(counts.items())),
                          "samples_per_clip": sorted(lengths)}
    (ws.out / "ingest_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foleygen", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("ingest", *STAGE_VERBS, "generate", "evaluate", "pipeline"):
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int, default=None)
        if verb == "evaluate":
            p.add_argument("--backend", choices=("random_projection", "joint_embed", "external"), default=None)
            p.add_argument("--reference", type=Path, default=None, help="reference manifest (default: from config)")
            p.add_argument("--outputs", type=Path, default=None, help="generated output directory")
        if verb == "generate":
            p.add_argument("--no-filter", action="store_true")
    p = sub.add_parser("make-synthetic", help="write a synthetic 7-class corpus with manifest.csv")
    p.add_argument("directory", type=Path)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--seconds", type=float, default=4.0)
    p.add_argument("--rate", type=int, default=22050)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--captions", action="store_true", help="free-text captions instead of class ids")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.verb == "make-synthetic":
            path = write_corpus(args.directory, args.per_class, args.seconds, args.rate, args.seed,
                                captions=args.captions)
            print(path)
            return 0
        cfg = load_config(args.config)
        if args.verb == "pipeline":
            report = run_pipeline(cfg, args.seed)
            print(report.format())
            return 0
        ws = Workspace(cfg, args.seed)
        if args.verb != "evaluate":
            ws.check_paths()
        with output_lock(ws.out), run_log(ws.out):
            if args.verb == "ingest":
                print(json.dumps(_ingest(cfg, ws), indent=2))
            elif args.verb in STAGE_VERBS:
                run_transfer_pipeline(cfg, stages=[STAGE_VERBS[args.verb]], workspace=ws)
            elif args.verb == "generate":
                results = generate_all(cfg, workspace=ws, filtered=False if args.no_filter else None)
                for name, r in results.items():
                    print(f"{name}: {len(r.paths)} clips, threshold {r.threshold:.4f}"
                          + (" (fallback)" if r.fallback or r.starved else ""))
            elif args.verb == "evaluate":
                report = evaluate_run(cfg, args.outputs, args.reference, args.backend)
                print(report.format())
    except FoleyError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
