"""End-to-end desk-scale benchmark: generate scenes, simulate a detector
that is healthy on base classes and degraded on novel ones, train the
correction model in two phases, refine the test detections and measure the
AP gain.

Training data comes in two pools mirroring the base/novel formulation: a
base pool whose scenes contain only base-class objects (phase 1 trains
there) and a small novel-rich pool contributing the k shots; phase 2
fine-tunes on the union with shot-containing images oversampled. The test
pool draws all classes uniformly.

A run is a pure function of its spec (single-threaded mode makes it
bitwise reproducible), and phase 1 is shared across shot budgets since it
never sees novel annotations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from detrefine import fusion, metrics, simulate, training
from detrefine.data import (
    KShotSplit,
    detections_by_image,
    make_kshot_split,
    merge_manifests,
)
from detrefine.model import FeatureExtractorConfig
from detrefine.rng import derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkSpec:
    """The shipped synthetic benchmark: 12 base + 4 novel classes."""

    n_classes: int = 16
    novel_class_ids: tuple[int, ...] = (3, 6, 9, 12)
    n_base_images: int = 170
    n_novel_images: int = 30
    n_test_images: int = 100
    ks: tuple[int, ...] = (1, 5)
    seed: int = 0
    # Relative frequency of novel classes inside the novel-rich pool.
    novel_pool_weight: float = 2.0
    # Scene difficulty: small noisy objects leave the correction model real
    # headroom between imprinting and fine-tuning.
    scene: dict = field(
        default_factory=lambda: dict(
            min_object_size=14,
            max_object_size=40,
            clutter_blobs=8.0,
            pixel_noise=0.07,
            texture_noise=0.16,
        )
    )
    noise: dict = field(default_factory=dict)  # degraded_novel_noise overrides
    train: training.TrainConfig = field(
        default_factory=lambda: training.TrainConfig(
            crop_size=48,
            phase1_iterations=1200,
            phase2_iterations=400,
            gt_shot_copies=4,
            hinge_normalization="mean",
            extractor=FeatureExtractorConfig(
                input_size=48, channels=(16, 32, 64), embed_dim=64, attention_stage=2
            ),
        )
    )

    def base_scene(self) -> simulate.SceneSpec:
        novel = set(self.novel_class_ids)
        weights = tuple(0.0 if c in novel else 1.0 for c in range(self.n_classes))
        return simulate.SceneSpec(
            n_classes=self.n_classes, class_weights=weights, **self.scene
        )

    def novel_scene(self) -> simulate.SceneSpec:
        novel = set(self.novel_class_ids)
        weights = tuple(
            self.novel_pool_weight if c in novel else 1.0
            for c in range(self.n_classes)
        )
        return simulate.SceneSpec(
            n_classes=self.n_classes, class_weights=weights, **self.scene
        )

    def test_scene(self) -> simulate.SceneSpec:
        return simulate.SceneSpec(n_classes=self.n_classes, **self.scene)

    def detector_noise(self) -> simulate.DetectorNoise:
        defaults = dict(novel_diag=0.45, novel_bg_mass=0.40, fp_rate=1.5)
        defaults.update(self.noise)
        return simulate.degraded_novel_noise(
            self.n_classes, self.novel_class_ids, **defaults
        )


def _class_partition(spec: BenchmarkSpec) -> KShotSplit:
    """The base/novel partition alone (no shots); enough for phase 1 and
    for grouping evaluation metrics."""
    return KShotSplit(
        base_class_ids=frozenset(range(spec.n_classes)) - frozenset(spec.novel_class_ids),
        novel_class_ids=frozenset(spec.novel_class_ids),
        k=1,
        selected_novel_annotation_ids=(),
    )


def _refine_all(test_manifest, test_images, test_dets, model):
    by_image = detections_by_image(test_dets)
    refined = []
    for rec in test_manifest.images:
        dets = by_image.get(rec.id, [])
        if not dets:
            continue
        refined.extend(fusion.refine_detections(test_images[rec.id], dets, model))
    return refined


def _ap_summary(report: metrics.EvalReport) -> dict:
    groups = report.mean_ap[0.5]
    return {
        "novel_ap50": groups.get("novel"),
        "base_ap50": groups.get("base"),
        "all_ap50": groups.get("all"),
    }


def run_benchmark(
    spec: BenchmarkSpec, *, single_thread: bool = False, keep_models: bool = False
) -> dict:
    """Run the benchmark and return a metric report (plain dict).

    The report contains only deterministic fields, so two single-threaded
    runs with the same spec produce identical reports.
    """
    train_cfg = replace(spec.train, single_thread=single_thread, seed=spec.seed)
    noise = spec.detector_noise()
    partition = _class_partition(spec)

    log.info(
        "generating %d base + %d novel train images, %d test images",
        spec.n_base_images, spec.n_novel_images, spec.n_test_images,
    )
    base_manifest, base_images = simulate.generate_dataset(
        spec.base_scene(), spec.n_base_images,
        derive_seed(spec.seed, "base-scenes"), image_id_prefix="base",
    )
    novel_manifest, novel_images = simulate.generate_dataset(
        spec.novel_scene(), spec.n_novel_images,
        derive_seed(spec.seed, "novel-scenes"), image_id_prefix="novel",
    )
    union_manifest = merge_manifests(base_manifest, novel_manifest)
    union_images = {**base_images, **novel_images}
    test_manifest, test_images = simulate.generate_dataset(
        spec.test_scene(), spec.n_test_images,
        derive_seed(spec.seed, "test-scenes"), image_id_prefix="test",
    )

    union_dets = simulate.simulate_detections(
        union_manifest, noise, derive_seed(spec.seed, "train-dets")
    )
    base_ids = {rec.id for rec in base_manifest.images}
    base_dets = [d for d in union_dets if d.image_id in base_ids]
    test_dets = simulate.simulate_detections(
        test_manifest, noise, derive_seed(spec.seed, "test-dets")
    )

    baseline_report = metrics.evaluate(
        test_dets, test_manifest, iou_thresholds=(0.5,), split=partition
    )
    baseline = _ap_summary(baseline_report)
    curve = metrics.oracle_fp_curve(
        test_dets, test_manifest, class_ids=spec.novel_class_ids
    )
    histogram = metrics.iou_histogram(test_dets, test_manifest, partition)

    log.info("phase 1 on the base pool: %d iterations", train_cfg.phase1_iterations)
    model, phase1_report = training.train_phase1(
        base_manifest, base_dets, base_images, train_cfg, partition
    )
    phase1_summary = {
        "holdout_first": phase1_report.eval_series[0]["holdout_loss_cls"],
        "holdout_last": phase1_report.eval_series[-1]["holdout_loss_cls"],
    }
    if phase1_summary["holdout_first"] > 0:
        phase1_summary["drop_fraction"] = 1.0 - (
            phase1_summary["holdout_last"] / phase1_summary["holdout_first"]
        )

    runs = {}
    models = {}
    for k in spec.ks:
        split = make_kshot_split(
            union_manifest, spec.novel_class_ids, k, derive_seed(spec.seed, "split", k)
        )
        log.info("k=%d: imprint + phase 2 (%d iterations)", k, train_cfg.phase2_iterations)
        imprinted = training.imprint_and_infer(
            model, union_manifest, split, union_dets, union_images, train_cfg
        )
        tuned, _ = training.train_phase2(
            imprinted, union_manifest, split, union_dets, union_images, train_cfg
        )
        refined = _refine_all(test_manifest, test_images, test_dets, tuned)
        fused_report = metrics.evaluate(
            [r.as_detection() for r in refined],
            test_manifest,
            iou_thresholds=(0.5,),
            split=partition,
        )
        fused = _ap_summary(fused_report)
        runs[f"k={k}"] = {
            "fused": fused,
            "gain_novel_points": 100.0 * (fused["novel_ap50"] - baseline["novel_ap50"]),
            "delta_base_points": 100.0 * (fused["base_ap50"] - baseline["base_ap50"]),
            "per_class_ap50": {
                str(c): fused_report.per_class_ap[0.5][c]
                for c in range(spec.n_classes)
            },
        }
        if keep_models:
            models[k] = {"imprinted": imprinted, "tuned": tuned}

    report = {
        "spec": {
            "n_classes": spec.n_classes,
            "novel_class_ids": list(spec.novel_class_ids),
            "n_base_images": spec.n_base_images,
            "n_novel_images": spec.n_novel_images,
            "n_test_images": spec.n_test_images,
            "ks": list(spec.ks),
            "seed": spec.seed,
            "novel_pool_weight": spec.novel_pool_weight,
            "scene": dict(spec.scene),
            "noise": dict(spec.noise),
            "train": train_cfg.to_dict(),
        },
        "baseline": baseline,
        "oracle_curve_novel": [[t, v] for t, v in curve],
        "iou_histogram": histogram,
        "phase1": phase1_summary,
        "runs": runs,
    }
    if keep_models:
        report["_models"] = models  # not serialized; for callers that refine further
    return report
