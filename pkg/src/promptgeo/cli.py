"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 backend error,
4 run whose metrics are all degenerate.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .backends import load_backend
from .backends.mock import SceneSpec
from .commands import (
    cmd_box,
    cmd_general,
    cmd_oneshot,
    cmd_point,
    cmd_report,
    cmd_text,
    write_mock_fixture,
)
from .errors import BackendError, EmptyPromptError, ManifestError, PreconditionError, SchemaError
from .manifest import PROMPT_MODES, load_manifest
from .oneshot import TrainConfig

EXEMPLAR_MODES = ("text_auto", "human_label")
EXIT_OK, EXIT_VALIDATION, EXIT_BACKEND, EXIT_DEGENERATE = 0, 2, 3, 4

logger = logging.getLogger("promptgeo")


def _unit_interval(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptgeo", description="Promptable segmentation of geospatial rasters.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one manifest entry in one prompt mode")
    run.add_argument("--manifest", required=True, type=Path)
    run.add_argument("--entry", required=True)
    run.add_argument("--mode", choices=PROMPT_MODES + EXEMPLAR_MODES,
                     help="defaults to the entry's prompt.mode; text_auto/human_label imply oneshot")
    run.add_argument("--backend", required=True, help="mock:<scene.json> or real:<config.json>")
    run.add_argument("--exemplar", choices=EXEMPLAR_MODES, default="text_auto",
                     help="exemplar source for oneshot mode")
    run.add_argument("--box-threshold", type=_unit_interval)
    run.add_argument("--text-threshold", type=_unit_interval)
    run.add_argument("--k-samples", type=int, default=5)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    run.add_argument("--lr0", type=float, default=TrainConfig.lr0)
    run.add_argument("--select", choices=("highest_confidence", "middle"), default="highest_confidence")
    run.add_argument("--aggregation", choices=("macro", "pooled"), default="macro")
    run.add_argument("--out", type=Path, default=Path("runs"))
    run.add_argument("--report-format", choices=("csv", "json", "text"), default="text")
    run.add_argument("--no-vector", action="store_true", help="skip GeoJSON export")

    rep = sub.add_parser("report", help="merge run outputs into one table")
    rep.add_argument("runs", nargs="+", type=Path, help="run directories or metrics.json files")
    rep.add_argument("--report-format", choices=("csv", "json", "text"), default="text")
    rep.add_argument("--output", type=Path)

    fix = sub.add_parser("mock-fixture", help="render a mock scene into raster, vectors and manifest")
    fix.add_argument("scene", type=Path)
    fix.add_argument("out", type=Path)
    fix.add_argument("--entry", default="mock")
    fix.add_argument("--target")
    return parser


def _run(args) -> int:
    manifest = load_manifest(args.manifest)
    entry = manifest.entry(args.entry)
    mode = args.mode or entry.prompt.mode
    exemplar = args.exemplar
    if mode in EXEMPLAR_MODES:
        mode, exemplar = "oneshot", mode
    # reject bad overrides before touching the backend
    for name, value in (("thresholds.box", args.box_threshold), ("thresholds.text", args.text_threshold)):
        if value is not None and not 0.0 <= value <= 1.0:
            raise ManifestError(f"{entry.field(name)} (override)", f"must lie in [0, 1], got {value}")
    try:
        train_cfg = TrainConfig(epochs=args.epochs, lr0=args.lr0)
    except ValueError as exc:
        raise ManifestError("--epochs/--lr0", str(exc)) from None
    backend = load_backend(args.backend)
    common = dict(manifest_hash=manifest.digest, vector=not args.no_vector)
    if mode == "general":
        record = cmd_general(entry, backend, args.out, **common)
    elif mode == "box":
        record = cmd_box(entry, backend, args.out, select=args.select, aggregation=args.aggregation, **common)
    elif mode == "point":
        record = cmd_point(entry, backend, args.out, select=args.select, aggregation=args.aggregation, **common)
    elif mode == "text":
        record = cmd_text(entry, backend, args.out, box_threshold=args.box_threshold,
                          text_threshold=args.text_threshold, select=args.select,
                          aggregation=args.aggregation, **common)
    else:
        record = cmd_oneshot(entry, backend, args.out, exemplar=exemplar, k_samples=args.k_samples,
                             seed=args.seed, box_threshold=args.box_threshold,
                             text_threshold=args.text_threshold, train_cfg=train_cfg, select=args.select,
                             aggregation=args.aggregation, **common)
    if record.rows:
        report = cmd_report(record.rows)
        sys.stdout.write(_render(report, args.report_format))
    logger.info("outputs written to %s", record.out_dir)
    return EXIT_DEGENERATE if record.degenerate_only else EXIT_OK


def _render(report, fmt: str) -> str:
    return {"csv": report.to_csv, "json": report.to_json, "text": report.to_text}[fmt]()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _run(args)
        if args.command == "report":
            text = _render(cmd_report(args.runs), args.report_format)
            if args.output:
                args.output.write_text(text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        path = write_mock_fixture(SceneSpec.load(args.scene), args.out, entry_id=args.entry, target=args.target)
        print(path)
        return EXIT_OK
    except (ManifestError, SchemaError, EmptyPromptError, PreconditionError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
