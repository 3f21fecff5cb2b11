"""Command-line entry point (``cadet``).

Exit codes: 0 on success, 2 for configuration or usage errors, 3 for
malformed or missing data (datasets, checkpoints, fixtures).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

log = logging.getLogger("cadet")


def _csv_ints(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _csv(text: str) -> List[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def cmd_gen_shapes(args) -> int:
    from .data.coco import save_coco_json, save_images
    from .data.shapes import SHAPE_CLASSES, ShapesConfig, generate_shapes
    from .pipeline.config import ConfigError

    try:
        cfg = ShapesConfig(
            num_images=args.num_images,
            image_size=args.image_size,
            classes=tuple(args.classes or SHAPE_CLASSES[:5]),
            min_objects=args.min_objects,
            max_objects=args.max_objects,
            min_size=args.min_size,
            max_size=args.max_size,
            clutter=args.clutter,
            seed=args.seed,
        )
        index, pixels = generate_shapes(cfg, args.vocabulary)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    save_images(pixels, index, out / "images")
    save_coco_json(index, out / "annotations.json")
    print(f"wrote {len(index.images)} images and {len(index.annotations)} annotations to {out}")
    return EXIT_OK


def _config_with_output(args):
    from .pipeline.config import load_config

    cfg = load_config(args.config)
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    return cfg


def cmd_train(args) -> int:
    from .pipeline.experiments import train_from_config

    cfg = _config_with_output(args)
    if cfg.output_dir is None:
        cfg.output_dir = "."
    _, state = train_from_config(cfg)
    print(json.dumps(state, indent=2))
    return EXIT_OK


def cmd_evaluate_ar(args) -> int:
    from .detector.checkpoint import load_checkpoint
    from .pipeline.experiments import evaluate_from_config

    cfg = _config_with_output(args)
    cfg.output_dir = None
    model, _ = load_checkpoint(args.checkpoint)
    report = evaluate_from_config(cfg, model)
    _write_or_print(report.to_json(), args.report)
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .pipeline.experiments import load_split, run_experiment
    from .pipeline.report import emit_report

    cfg = _config_with_output(args)
    report = run_experiment(cfg)
    if cfg.output_dir is not None:
        difficulty = load_split(cfg.split).difficulty if cfg.experiment == "I" else None
        emit_report({cfg.variant: report}, cfg.output_dir, difficulty=difficulty)
    print(report.to_json(), end="")
    return EXIT_OK


def cmd_split_classes(args) -> int:
    from . import resources
    from .protocol import ConfusionMatrix, f1_scores, select_unseen

    path = args.confusion or resources.resource_path(resources.VOC_CONFUSION)
    cm = _load_data(lambda: ConfusionMatrix.load(path), path)
    split = select_unseen(f1_scores(cm, use_background=not args.no_background))
    _write_or_print(json.dumps(split.to_dict(), indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_build_exclusion(args) -> int:
    from . import resources
    from .pipeline.experiments import load_aliases
    from .protocol import excluded_classes, load_descriptions, load_hierarchy, normalize_name

    hierarchy, descriptions, aliases = args.hierarchy, args.descriptions, args.aliases
    if hierarchy is None:
        # the bundled miniature comes with its own descriptions and COCO alias map
        hierarchy = resources.resource_path(resources.OPENIMAGES_HIERARCHY)
        descriptions = descriptions or resources.resource_path(resources.OPENIMAGES_DESCRIPTIONS)
        aliases = aliases or resources.resource_path(resources.COCO_ALIASES)
    aliases = load_aliases(aliases)
    desc = _load_data(lambda: load_descriptions(descriptions), descriptions) if descriptions else None
    tree = _load_data(lambda: load_hierarchy(hierarchy, desc, aliases), hierarchy)
    reference = [normalize_name(n, aliases) for n in _read_names(args.reference)]
    warnings: List[str] = []
    excluded = excluded_classes(tree, reference, warnings)
    kept = sorted(tree.nodes - excluded)
    doc = {"reference": reference, "excluded": sorted(excluded), "kept": kept, "warnings": warnings}
    _write_or_print(json.dumps(doc, indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_eval_downstream(args) -> int:
    from .data.coco import load_coco_json, load_images
    from .detector.checkpoint import load_checkpoint
    from .downstream import IoUOracleClassifier, SocketClassifier, evaluate_downstream, image_truths
    from .pipeline.config import ConfigError
    from .pipeline.evaluation import predict_dataset

    index = load_coco_json(args.annotations)
    pixels = load_images(index, args.images)
    if args.classifier == "oracle":
        classifier = IoUOracleClassifier(image_truths(index))
    elif args.classifier.startswith("socket:"):
        try:
            classifier = SocketClassifier(args.classifier[len("socket:") :], timeout=args.timeout, retries=args.retries)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    else:
        raise ConfigError(f"--classifier must be 'oracle' or 'socket:HOST:PORT', got {args.classifier!r}")
    model, _ = load_checkpoint(args.checkpoint)
    detections = predict_dataset(model, index, pixels, max_detections=max(args.m_grid))
    report = evaluate_downstream(
        index, pixels, detections, classifier, args.m_grid, args.padding, max_in_flight=args.max_in_flight
    )
    _write_or_print(json.dumps(report.to_dict(), indent=2) + "\n", args.report)
    return EXIT_OK


def cmd_emit_report(args) -> int:
    from .metrics import EvalReport
    from .pipeline.experiments import load_split
    from .pipeline.report import emit_report

    reports = {}
    for item in args.reports:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        reports[name] = _load_data(lambda: EvalReport.from_json(Path(path).read_text()), path)
    difficulty = load_split(args.split).difficulty if args.split else None
    written = emit_report(reports, args.out, args.format, difficulty)
    for key, path in written.items():
        print(f"{key}: {path}")
    return EXIT_OK


def cmd_config_keys(args) -> int:
    from .pipeline.config import config_reference

    print(config_reference())
    return EXIT_OK


# helpers


def _write_or_print(text: str, path: Optional[str]) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _read_names(spec: str) -> List[str]:
    """Comma-separated names, or ``@file`` with one name per line."""
    if spec.startswith("@"):
        path = spec[1:]
        text = _load_data(lambda: Path(path).read_text(), path)
        return [line.strip() for line in text.splitlines() if line.strip()]
    return _csv(spec)


class DataError(Exception):
    pass


def _load_data(fn, what):
    try:
        return fn()
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{what}: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cadet", description="Class-agnostic detection experiments at toy scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-shapes", help="generate a synthetic shapes dataset in COCO format")
    g.add_argument("--out", required=True, help="output directory (annotations.json + images/)")
    g.add_argument("--num-images", type=int, default=100)
    g.add_argument("--image-size", type=int, default=128)
    g.add_argument("--classes", type=_csv, default=None, help="comma-separated shape classes")
    g.add_argument("--vocabulary", type=_csv, default=None, help="class-id order (defaults to --classes)")
    g.add_argument("--min-objects", type=int, default=1)
    g.add_argument("--max-objects", type=int, default=4)
    g.add_argument("--min-size", type=int, default=14)
    g.add_argument("--max-size", type=int, default=56)
    g.add_argument("--clutter", type=int, default=0, help="non-object strokes per image")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_shapes)

    t = sub.add_parser("train", help="train the variant described by a config document")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate-ar", help="score a checkpoint with AR@k as the config prescribes")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--report", help="write the EvalReport JSON here (stdout otherwise)")
    e.set_defaults(func=cmd_evaluate_ar)

    x = sub.add_parser("experiment", help="train and evaluate in one go, emitting all report formats")
    x.add_argument("--config", required=True)
    x.add_argument("--out", help="output directory (overrides output_dir)")
    x.set_defaults(func=cmd_experiment)

    s = sub.add_parser("split-classes", help="pick easy/medium/hard unseen classes from a confusion matrix")
    s.add_argument("--confusion", help="confusion-matrix JSON (bundled VOC fixture when omitted)")
    s.add_argument("--no-background", action="store_true", help="ignore background miss/false-positive counts")
    s.add_argument("--out", help="write the ClassSplit JSON here (stdout otherwise)")
    s.set_defaults(func=cmd_split_classes)

    b = sub.add_parser("build-exclusion", help="exclude hierarchy classes related to a reference class list")
    b.add_argument("--hierarchy", help="Open Images style hierarchy JSON (bundled miniature when omitted)")
    b.add_argument("--descriptions", help="label-id to name CSV")
    b.add_argument("--aliases", help="JSON alias map (bundled COCO map with the bundled hierarchy)")
    b.add_argument("--reference", required=True, help="comma-separated classes, or @FILE with one per line")
    b.add_argument("--out", help="write excluded/kept lists here (stdout otherwise)")
    b.set_defaults(func=cmd_build_exclusion)

    d = sub.add_parser("eval-downstream", help="crop-and-classify accuracy of a detector")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--annotations", required=True, help="COCO JSON with ground-truth boxes and labels")
    d.add_argument("--images", required=True)
    d.add_argument("--m-grid", type=_csv_ints, default=[1, 5, 10])
    d.add_argument("--padding", type=float, default=0.0, help="context padding as a fraction of box size")
    d.add_argument("--classifier", default="oracle", help="'oracle' or 'socket:HOST:PORT'")
    d.add_argument("--timeout", type=float, default=10.0, help="socket timeout in seconds")
    d.add_argument("--retries", type=int, default=2, help="extra attempts per classifier call")
    d.add_argument("--max-in-flight", type=int, default=1, help="concurrent classifier requests")
    d.add_argument("--report", help="write the DownstreamReport JSON here (stdout otherwise)")
    d.set_defaults(func=cmd_eval_downstream)

    r = sub.add_parser("emit-report", help="render EvalReport JSON files as JSON, table and plots")
    r.add_argument("reports", nargs="+", help="report JSON files, optionally NAME=PATH")
    r.add_argument("--out", required=True)
    r.add_argument("--format", type=_csv, default=["json", "table", "plots"], help="comma-separated subset of json,table,plots")
    r.add_argument("--split", help="ClassSplit JSON used to label micro columns by difficulty")
    r.set_defaults(func=cmd_emit_report)

    c = sub.add_parser("config-keys", help="list every configuration key with its documentation")
    c.set_defaults(func=cmd_config_keys)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    from .data.coco import DatasetError
    from .detector.checkpoint import CheckpointError
    from .pipeline.config import ConfigError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
