"""Command-line pipeline: generate, simulate, split, train, imprint,
refine, evaluate, analyze.

Each subcommand writes its artifacts plus a ``run_<command>.json``
provenance record (effective config, config hash, seed, versions) into the
output directory, enabling exact reruns. Config precedence for training
commands: CLI flag > config file > built-in default; the effective config
is printed at startup.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

import detrefine
from detrefine import fusion, metrics, simulate, training
from detrefine.data import (
    SchemaError,
    detections_by_image,
    load_detections,
    load_images,
    load_manifest,
    load_split,
    make_kshot_split,
    save_detections,
    save_manifest,
    save_split,
)
from detrefine.model import load_checkpoint, save_checkpoint

log = logging.getLogger("detrefine.cli")


def _write_run_record(out_dir: Path, command: str, config: dict) -> None:
    import torch

    payload = {
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(
            json.dumps(config, sort_keys=True).encode()
        ).hexdigest(),
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "torch": torch.__version__,
            "detrefine": detrefine.__version__,
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"run_{command}.json").write_text(json.dumps(payload, indent=2) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_config(args) -> training.TrainConfig:
    """Built-in defaults, overlaid by --config file, overlaid by flags."""
    payload = training.TrainConfig().to_dict()
    if getattr(args, "config", None):
        payload.update(json.loads(Path(args.config).read_text()))
    flag_map = {
        "seed": "seed",
        "iterations": None,  # handled per phase below
        "learning_rate": "learning_rate",
        "crop_size": "crop_size",
        "margin": "margin",
        "logit_scale": "logit_scale",
        "jitter_scale": "jitter_scale",
        "oversample": "novel_oversample",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if key is not None and value is not None:
            payload[key] = value
    if getattr(args, "iterations", None) is not None:
        phase = getattr(args, "phase", 1)
        payload["phase1_iterations" if phase == 1 else "phase2_iterations"] = (
            args.iterations
        )
    if getattr(args, "single_thread", False):
        payload["single_thread"] = True
    if getattr(args, "crop_size", None) is not None:
        extractor = dict(payload["extractor"])
        extractor["input_size"] = args.crop_size
        payload["extractor"] = extractor
    config = training.TrainConfig.from_dict(payload)
    print(
        "effective train config: " + json.dumps(config.to_dict(), sort_keys=True),
        file=sys.stderr,
    )
    return config


def cmd_generate(args) -> int:
    out = _out_dir(args)
    weights = None
    if args.novel and args.novel_frequency != 1.0:
        novel = set(args.novel)
        weights = tuple(
            args.novel_frequency if c in novel else 1.0 for c in range(args.classes)
        )
    spec = simulate.SceneSpec(
        n_classes=args.classes,
        canvas_width=args.canvas,
        canvas_height=args.canvas,
        class_weights=weights,
    )
    manifest, pixels = simulate.generate_dataset(spec, args.images, args.seed)
    simulate.write_images(pixels, manifest, out)
    save_manifest(manifest, out / "manifest.json")
    _write_run_record(
        out,
        "generate",
        {
            "classes": args.classes,
            "images": args.images,
            "seed": args.seed,
            "canvas": args.canvas,
            "novel": list(args.novel or []),
            "novel_frequency": args.novel_frequency,
        },
    )
    log.info("wrote %d images and manifest to %s", args.images, out)
    return 0


def cmd_simulate(args) -> int:
    manifest = load_manifest(args.manifest)
    k = manifest.num_classes
    if args.preset == "noiseless":
        noise = simulate.noiseless(k)
    else:
        noise = simulate.degraded_novel_noise(
            k,
            args.novel or [],
            miss_rate=args.miss_rate,
            fp_rate=args.fp_rate,
            jitter_scale=args.jitter_scale,
            base_diag=args.base_diag,
            novel_diag=args.novel_diag,
        )
    detections = simulate.simulate_detections(manifest, noise, args.seed)
    out = _out_dir(args)
    save_detections(detections, out / "detections.json")
    _write_run_record(
        out,
        "simulate",
        {
            "manifest": str(args.manifest),
            "preset": args.preset,
            "seed": args.seed,
            "novel": list(args.novel or []),
            "miss_rate": args.miss_rate,
            "fp_rate": args.fp_rate,
            "jitter_scale": args.jitter_scale,
            "base_diag": args.base_diag,
            "novel_diag": args.novel_diag,
        },
    )
    log.info("wrote %d detections to %s", len(detections), out / "detections.json")
    return 0


def cmd_split(args) -> int:
    manifest = load_manifest(args.manifest)
    split = make_kshot_split(manifest, args.novel, args.k, args.seed)
    out = _out_dir(args)
    save_split(split, out / "split.json")
    _write_run_record(
        out,
        "split",
        {
            "manifest": str(args.manifest),
            "novel": list(args.novel),
            "k": args.k,
            "seed": args.seed,
        },
    )
    log.info(
        "selected %d novel shots over %d classes",
        len(split.selected_novel_annotation_ids),
        len(split.novel_class_ids),
    )
    return 0


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    images = load_images(manifest, args.images_dir)
    detections = load_detections(args.detections, manifest)
    split = load_split(args.split) if args.split else None
    config = _train_config(args)
    out = _out_dir(args)
    if args.phase == 1:
        model, report = training.train_phase1(
            manifest, detections, images, config, split
        )
    else:
        if not args.checkpoint:
            raise SchemaError("--phase 2 requires --checkpoint from imprint")
        if split is None:
            raise SchemaError("--phase 2 requires --split")
        model, _ = load_checkpoint(args.checkpoint)
        model, report = training.train_phase2(
            model, manifest, split, detections, images, config
        )
    ckpt_path = out / "checkpoint.pt"
    save_checkpoint(
        model,
        ckpt_path,
        base_class_ids=sorted(split.base_class_ids) if split else range(manifest.num_classes),
        novel_class_ids=sorted(split.novel_class_ids) if split else (),
        extra={"phase": args.phase},
    )
    report.checkpoint_path = str(ckpt_path)
    report.save(out / "train_report.json")
    _write_run_record(
        out,
        "train",
        {"phase": args.phase, "train": config.to_dict(), "split": str(args.split)},
    )
    log.info("phase %d done; checkpoint at %s", args.phase, ckpt_path)
    return 0


def cmd_imprint(args) -> int:
    manifest = load_manifest(args.manifest)
    images = load_images(manifest, args.images_dir)
    detections = load_detections(args.detections, manifest)
    split = load_split(args.split)
    config = _train_config(args)
    model, meta = load_checkpoint(args.checkpoint)
    model = training.imprint_and_infer(
        model, manifest, split, detections, images, config
    )
    out = _out_dir(args)
    ckpt_path = out / "checkpoint.pt"
    save_checkpoint(
        model,
        ckpt_path,
        base_class_ids=sorted(split.base_class_ids),
        novel_class_ids=sorted(split.novel_class_ids),
        extra={"phase": "imprinted", "k": split.k},
    )
    _write_run_record(
        out,
        "imprint",
        {"checkpoint": str(args.checkpoint), "split": str(args.split),
         "train": config.to_dict()},
    )
    log.info("imprinted %d novel classes; checkpoint at %s",
             len(split.novel_class_ids), ckpt_path)
    return 0


def cmd_refine(args) -> int:
    manifest = load_manifest(args.manifest)
    images = load_images(manifest, args.images_dir)
    detections = load_detections(args.detections, manifest)
    model, _ = load_checkpoint(args.checkpoint)
    by_image = detections_by_image(detections)
    refined = []
    for rec in manifest.images:
        dets = by_image.get(rec.id, [])
        if not dets:
            continue
        refined.extend(
            fusion.refine_detections(
                images[rec.id],
                dets,
                model,
                batch_size=args.batch_size,
                nms_iou=0.5 if args.nms else None,
            )
        )
    out = _out_dir(args)
    fusion.save_refined_detections(refined, out / "refined.json")
    _write_run_record(
        out,
        "refine",
        {
            "checkpoint": str(args.checkpoint),
            "detections": str(args.detections),
            "nms": bool(args.nms),
            "batch_size": args.batch_size,
        },
    )
    log.info("refined %d detections to %s", len(refined), out / "refined.json")
    return 0


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    detections = load_detections(args.detections, manifest)
    split = load_split(args.split) if args.split else None
    report = metrics.evaluate(
        detections, manifest, iou_thresholds=tuple(args.thresholds), split=split
    )
    out = _out_dir(args)
    report.save(out / "eval_report.json")
    _write_run_record(
        out,
        "evaluate",
        {
            "detections": str(args.detections),
            "thresholds": list(args.thresholds),
            "split": str(args.split) if args.split else None,
        },
    )
    for t in args.thresholds:
        log.info("AP@%.2f: %s", t, report.mean_ap[t])
    return 0


def cmd_analyze(args) -> int:
    manifest = load_manifest(args.manifest)
    detections = load_detections(args.detections, manifest)
    split = load_split(args.split)
    out = _out_dir(args)
    histogram = metrics.iou_histogram(detections, manifest, split, bins=args.bins)
    (out / "iou_histogram.json").write_text(json.dumps(histogram, indent=2) + "\n")
    thresholds = tuple(args.thresholds)
    curve = metrics.oracle_fp_curve(
        detections,
        manifest,
        iou_thresholds=thresholds,
        class_ids=sorted(split.novel_class_ids),
        top_per_image=args.top,
    )
    (out / "oracle_curve.json").write_text(
        json.dumps([[t, v] for t, v in curve], indent=2) + "\n"
    )
    _plot_analysis(histogram, curve, out)
    _write_run_record(
        out,
        "analyze",
        {
            "detections": str(args.detections),
            "split": str(args.split),
            "bins": args.bins,
            "thresholds": list(thresholds),
            "top": args.top,
        },
    )
    log.info("analysis written to %s", out)
    return 0


def _plot_analysis(histogram, curve, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    edges = histogram["edges"]
    centers = [(a + b) / 2 for a, b in zip(edges[:-1], edges[1:])]
    width = (edges[1] - edges[0]) * 0.4
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    axes[0].bar(
        [c - width / 2 for c in centers], histogram["base"], width=width, label="base"
    )
    axes[0].bar(
        [c + width / 2 for c in centers], histogram["novel"], width=width, label="novel"
    )
    axes[0].set_xlabel("max IoU with same-class ground truth")
    axes[0].set_ylabel("detections")
    axes[0].set_title("Localization quality by split")
    axes[0].legend()
    ts = [t for t, _ in curve]
    vals = [v if v is not None else float("nan") for _, v in curve]
    axes[1].plot(ts, vals, marker="o")
    axes[1].set_xlabel("oracle IoU threshold")
    axes[1].set_ylabel("novel AP50")
    axes[1].set_ylim(0, 1)
    axes[1].set_title("Potential gain from correcting false positives")
    fig.tight_layout()
    fig.savefig(out / "analysis.png", dpi=120)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="detrefine",
        description="Low-shot detection score refinement pipeline",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=12)
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canvas", type=int, default=128)
    p.add_argument("--novel", type=int, nargs="*", default=None,
                   help="novel class ids (rendered rarer with --novel-frequency)")
    p.add_argument("--novel-frequency", type=float, default=1.0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("simulate", help="simulate base-detector detections")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=["noiseless", "degraded"], default="degraded")
    p.add_argument("--novel", type=int, nargs="*", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--miss-rate", type=float, default=0.05)
    p.add_argument("--fp-rate", type=float, default=1.0)
    p.add_argument("--jitter-scale", type=float, default=20.0)
    p.add_argument("--base-diag", type=float, default=0.90)
    p.add_argument("--novel-diag", type=float, default=0.25)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("split", help="select the k-shot novel annotations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--novel", type=int, nargs="+", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    def add_train_args(p, with_phase=False):
        p.add_argument("--manifest", required=True)
        p.add_argument("--images-dir", required=True)
        p.add_argument("--detections", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config", default=None, help="JSON file of train-config fields")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--iterations", type=int, default=None)
        p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
        p.add_argument("--crop-size", dest="crop_size", type=int, default=None)
        p.add_argument("--margin", type=float, default=None)
        p.add_argument("--logit-scale", dest="logit_scale", type=float, default=None)
        p.add_argument("--jitter-scale", dest="jitter_scale", type=float, default=None)
        p.add_argument("--oversample", type=float, default=None)
        p.add_argument("--single-thread", action="store_true")

    p = sub.add_parser("train", help="train the correction model (phase 1 or 2)")
    add_train_args(p)
    p.add_argument("--phase", type=int, choices=[1, 2], default=1)
    p.add_argument("--split", default=None)
    p.add_argument("--checkpoint", default=None, help="input checkpoint for phase 2")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("imprint", help="imprint novel weights and infer background")
    add_train_args(p)
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_imprint)

    p = sub.add_parser("refine", help="refine detections with a trained model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images-dir", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--nms", action="store_true",
                   help="apply class-wise greedy NMS (IoU 0.5) after fusion")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("evaluate", help="compute AP metrics for a detections file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--thresholds", type=float, nargs="+", default=[0.5, 0.75])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="IoU histograms and the oracle-correction curve")
    p.add_argument("--manifest", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--top", type=int, default=300)
    p.add_argument("--thresholds", type=float, nargs="+",
                   default=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SchemaError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        logging.exception("unexpected failure: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
