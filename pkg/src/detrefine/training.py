"""Two-phase optimization of the correction model.

Phase 1 trains extractor, attention block and cosine head on base-class
proposals (novel annotations are invisible). Imprinting then writes the
novel weight rows from the k shot crops and re-infers the background row
from background proposals pooled over base- and novel-side images. Phase 2
fine-tunes everything on the union with novel-containing images
oversampled and the inter-class separation hinge active.

All randomness (batch composition, jitter, initialization) derives from
the config seed; with `single_thread=True` runs are bitwise reproducible.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from detrefine import sampling
from detrefine.data import (
    Annotation,
    DatasetManifest,
    Detection,
    KShotSplit,
    detections_by_image,
    to_float_image,
)
from detrefine.geometry import jitter_box
from detrefine.head import imprint_novel_weights, infer_background_weight
from detrefine.losses import LabeledBatch, loss_bg, loss_cls, loss_sp
from detrefine.model import CorrectionModel, FeatureExtractorConfig
from detrefine.rng import substream

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; message carries the offending batch seed."""


@dataclass(frozen=True)
class TrainConfig:
    images_per_batch: int = 4
    boxes_per_image: int = 32
    crop_size: int = 64
    logit_scale: float = 16.0
    margin: float = 0.2
    jitter_scale: float = 10.0
    learning_rate: float = 0.01
    momentum: float = 0.9
    # The attention block's pairwise response scales with the number of map
    # entries, giving its zero-init projection a large first-step gradient;
    # clipping keeps plain SGD in a trainable regime. None disables.
    grad_clip_norm: float | None = 5.0
    lr_decay_factor: float = 0.1
    lr_decay_at: float = 2 / 3
    phase1_iterations: int = 2000
    phase2_iterations: int = 1000
    phase2_learning_rate: float = 0.001
    novel_oversample: float = 4.0
    seed: int = 0
    top_per_image: int = 300
    fg_iou: float = 0.5
    bg_iou: float = 0.1
    holdout_fraction: float = 0.1
    eval_every: int = 200
    gt_shot_copies: int = 2
    # Phase 2 drops proposals that overlap a selected novel shot at >=
    # fg_iou with the wrong argmax class: labeling the only known novel
    # objects as background contradicts the shot supervision.
    drop_shot_false_positives: bool = True
    bg_pool_per_source: int = 128
    hinge_normalization: str = "sum"
    trainable_scale: bool = False
    freeze_imprinted: bool = False
    single_thread: bool = False
    extractor: FeatureExtractorConfig = field(default_factory=FeatureExtractorConfig)

    def __post_init__(self):
        positive = {
            "images_per_batch": self.images_per_batch,
            "boxes_per_image": self.boxes_per_image,
            "crop_size": self.crop_size,
            "logit_scale": self.logit_scale,
            "margin": self.margin,
            "jitter_scale": self.jitter_scale,
            "learning_rate": self.learning_rate,
            "phase2_learning_rate": self.phase2_learning_rate,
            "novel_oversample": self.novel_oversample,
            "top_per_image": self.top_per_image,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.phase1_iterations < 0 or self.phase2_iterations < 0:
            raise ValueError("iteration counts must be >= 0")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must be in [0, 1)")
        if self.crop_size != self.extractor.input_size:
            raise ValueError(
                f"crop_size {self.crop_size} must match extractor input size "
                f"{self.extractor.input_size}"
            )

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["extractor"]["channels"] = list(payload["extractor"]["channels"])
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        payload = dict(payload)
        if "extractor" in payload:
            ex = dict(payload["extractor"])
            if "channels" in ex:
                ex["channels"] = tuple(ex["channels"])
            payload["extractor"] = FeatureExtractorConfig(**ex)
        return cls(**payload)


@dataclass
class TrainReport:
    phase: str
    loss_series: list[dict] = field(default_factory=list)
    eval_series: list[dict] = field(default_factory=list)
    wall_time_s: float = 0.0
    checkpoint_path: str | None = None

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "loss_series": self.loss_series,
            "eval_series": self.eval_series,
            "wall_time_s": self.wall_time_s,
            "checkpoint_path": self.checkpoint_path,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _apply_determinism(config: TrainConfig) -> None:
    torch.manual_seed(config.seed)
    if config.single_thread:
        torch.set_num_threads(1)


def _visible_annotations(
    manifest: DatasetManifest, split: KShotSplit | None, phase: int
) -> list[Annotation]:
    """What the trainer is allowed to see: all annotations when there is no
    split; base-class annotations in phase 1; base plus the selected novel
    shots in phase 2."""
    if split is None:
        return list(manifest.annotations)
    base = [a for a in manifest.annotations if a.class_id in split.base_class_ids]
    if phase == 1:
        return base
    selected = set(split.selected_novel_annotation_ids)
    novel = [a for a in manifest.annotations if a.id in selected]
    return base + novel


def _by_image(annotations) -> dict[str, list[Annotation]]:
    grouped: dict[str, list[Annotation]] = {}
    for ann in annotations:
        grouped.setdefault(ann.image_id, []).append(ann)
    return grouped


def _crops_to_tensors(crops: list[sampling.ProposalCrop]):
    x = torch.from_numpy(np.stack([c.crop for c in crops]).astype(np.float32))
    labels = torch.tensor([c.label for c in crops], dtype=torch.int64)
    return x, labels


def _loss_components(model, x, labels, novel_ids, config):
    batch = LabeledBatch(
        embeddings=model.embed(x),
        labels=labels,
        class_weights=model.head.normalized_weight(),
        novel_class_ids=novel_ids,
    )
    cls = loss_cls(batch, model.head.logit_scale)
    bg = loss_bg(batch, config.margin, normalization=config.hinge_normalization)
    sp = loss_sp(batch, config.margin, normalization=config.hinge_normalization)
    return cls, bg, sp


def _probe_loss(model, x, labels) -> float:
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            batch = LabeledBatch(
                embeddings=model.embed(x),
                labels=labels,
                class_weights=model.head.normalized_weight(),
            )
            return float(loss_cls(batch, model.head.logit_scale))
    finally:
        model.train(was_training)


def _without_shot_false_positives(
    dets_by_image: dict, shots_by_image: dict, fg_iou: float
) -> dict:
    """Detections minus those that sit on a selected shot (IoU >= fg_iou)
    while claiming a different class."""
    from detrefine.geometry import iou

    filtered = dict(dets_by_image)
    for image_id, shots in shots_by_image.items():
        kept = []
        for det in dets_by_image.get(image_id, []):
            conflict = any(
                iou(det.box, ann.box) >= fg_iou and det.argmax_class != ann.class_id
                for ann in shots
            )
            if not conflict:
                kept.append(det)
        filtered[image_id] = kept
    return filtered


def _gt_shot_crops(
    record, image, shots_here, config: TrainConfig, rng
) -> list[sampling.ProposalCrop]:
    """Jittered copies of the selected ground-truth shots in one image,
    labeled with their true class."""
    crops = []
    for ann in shots_here:
        for _ in range(config.gt_shot_copies):
            box = jitter_box(
                ann.box, config.jitter_scale, rng, record.width, record.height
            )
            if box.width < 1.0 or box.height < 1.0:
                continue
            crops.append(
                sampling.ProposalCrop(
                    image_id=record.id,
                    box=box,
                    group=sampling.FOREGROUND,
                    label=ann.class_id,
                    crop=sampling.crop_and_resize(image, box, config.crop_size),
                )
            )
    return crops


def _run_phase(
    model: CorrectionModel,
    manifest: DatasetManifest,
    detections,
    images,
    config: TrainConfig,
    *,
    phase: int,
    split: KShotSplit | None,
) -> TrainReport:
    start = time.perf_counter()
    report = TrainReport(phase=f"phase{phase}")
    iterations = config.phase1_iterations if phase == 1 else config.phase2_iterations
    lr = config.learning_rate if phase == 1 else config.phase2_learning_rate

    visible = _visible_annotations(manifest, split, phase)
    gts_by_image = _by_image(visible)
    dets_by_image = detections_by_image(detections)
    images_float = {k: to_float_image(v) for k, v in images.items()}
    novel_ids = frozenset(split.novel_class_ids) if (split and phase == 2) else frozenset()
    n_classes = manifest.num_classes

    if phase == 2 and split is not None and config.drop_shot_false_positives:
        shot_ids = set(split.selected_novel_annotation_ids)
        dets_by_image = _without_shot_false_positives(
            dets_by_image,
            _by_image([a for a in manifest.annotations if a.id in shot_ids]),
            config.fg_iou,
        )

    # Hold out a slice of images for the probe loss; never trained on.
    all_ids = [rec.id for rec in manifest.images]
    n_holdout = int(round(config.holdout_fraction * len(all_ids)))
    perm = substream(config.seed, "holdout").permutation(len(all_ids))
    holdout_ids = {all_ids[i] for i in perm[:n_holdout]}
    train_ids = [i for i in all_ids if i not in holdout_ids]
    if not train_ids:
        raise ValueError("holdout fraction leaves no training images")

    probe = None
    if holdout_ids:
        probe_crops = sampling.build_batch(
            [manifest.image(i) for i in sorted(holdout_ids)[:8]],
            images_float,
            dets_by_image,
            gts_by_image,
            n_classes=n_classes,
            boxes_per_image=config.boxes_per_image,
            crop_size=config.crop_size,
            jitter_scale=config.jitter_scale,
            seed=config.seed ^ 0x5EED,
            top_per_image=config.top_per_image,
            fg_iou=config.fg_iou,
            bg_iou=config.bg_iou,
        )
        if probe_crops:
            probe = _crops_to_tensors(probe_crops)

    # Novel-containing images are oversampled in phase 2.
    selected = set(split.selected_novel_annotation_ids) if split else set()
    shots_by_image = _by_image(
        [a for a in manifest.annotations if a.id in selected]
    )
    weights = np.ones(len(train_ids))
    if phase == 2 and config.novel_oversample != 1.0:
        for i, image_id in enumerate(train_ids):
            if image_id in shots_by_image:
                weights[i] = config.novel_oversample
    probabilities = weights / weights.sum()

    frozen_rows = None
    if phase == 2 and config.freeze_imprinted and split is not None:
        frozen_rows = sorted(split.novel_class_ids) + [model.head.background_index]
    hook_handle = None
    if frozen_rows:
        mask = torch.ones_like(model.head.weight)
        mask[frozen_rows] = 0.0
        hook_handle = model.head.weight.register_hook(lambda g: g * mask)

    optimizer = torch.optim.SGD(model.parameters(), lr=lr, momentum=config.momentum)
    decay_at = int(config.lr_decay_at * iterations) if phase == 1 else None

    def snapshot(iteration):
        if probe is not None:
            report.eval_series.append(
                {"iteration": iteration, "holdout_loss_cls": _probe_loss(model, *probe)}
            )

    model.train()
    snapshot(0)
    try:
        for it in range(iterations):
            if decay_at is not None and it == decay_at and it > 0:
                for group in optimizer.param_groups:
                    group["lr"] *= config.lr_decay_factor
            batch_seed = (config.seed, f"phase{phase}", it)
            rng_iter = substream(*batch_seed)
            n_pick = min(config.images_per_batch, len(train_ids))
            picked = rng_iter.choice(len(train_ids), size=n_pick, replace=False,
                                     p=probabilities)
            records = [manifest.image(train_ids[i]) for i in picked]
            crops = sampling.build_batch(
                records,
                images_float,
                dets_by_image,
                gts_by_image,
                n_classes=n_classes,
                boxes_per_image=config.boxes_per_image,
                crop_size=config.crop_size,
                jitter_scale=config.jitter_scale,
                seed=int(rng_iter.integers(2**63)),
                top_per_image=config.top_per_image,
                fg_iou=config.fg_iou,
                bg_iou=config.bg_iou,
            )
            if phase == 2 and config.gt_shot_copies > 0:
                for rec in records:
                    shots_here = shots_by_image.get(rec.id)
                    if shots_here:
                        crops.extend(
                            _gt_shot_crops(
                                rec, images_float[rec.id], shots_here, config, rng_iter
                            )
                        )
            if not crops:
                log.debug("iteration %d: no crops; skipping", it)
                continue
            x, labels = _crops_to_tensors(crops)
            cls, bg, sp = _loss_components(model, x, labels, novel_ids, config)
            total = cls + bg + sp
            if not torch.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at iteration {it} (batch seed {batch_seed}): "
                    f"cls={cls.detach().item()}, bg={bg.detach().item()}, "
                    f"sp={sp.detach().item()}"
                )
            optimizer.zero_grad()
            total.backward()
            if config.grad_clip_norm is not None:
                torch.nn.utils.clip_grad_norm_(
                    model.parameters(), config.grad_clip_norm
                )
            optimizer.step()
            report.loss_series.append(
                {
                    "iteration": it,
                    "loss_cls": cls.detach().item(),
                    "loss_bg": bg.detach().item(),
                    "loss_sp": sp.detach().item(),
                    "loss_total": total.detach().item(),
                }
            )
            if config.eval_every and (it + 1) % config.eval_every == 0:
                snapshot(it + 1)
        if iterations and (not config.eval_every or iterations % config.eval_every):
            snapshot(iterations)
    finally:
        if hook_handle is not None:
            hook_handle.remove()
    model.eval()
    report.wall_time_s = time.perf_counter() - start
    return report


def train_phase1(
    manifest: DatasetManifest,
    detections,
    images,
    config: TrainConfig,
    split: KShotSplit | None = None,
) -> tuple[CorrectionModel, TrainReport]:
    """Train a fresh model on base-class proposals plus background.

    With a split, novel annotations are invisible: proposals over novel
    objects group as background or false positives, exactly as a detector
    trained without those labels would see them.
    """
    _apply_determinism(config)
    model = CorrectionModel(
        config.extractor,
        manifest.class_names,
        logit_scale=config.logit_scale,
        trainable_scale=config.trainable_scale,
    )
    report = _run_phase(
        model, manifest, detections, images, config, phase=1, split=split
    )
    return model, report


def _embed_crops(model: CorrectionModel, crops: list[np.ndarray], batch_size=128):
    outs = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(crops), batch_size):
            x = torch.from_numpy(
                np.stack(crops[i : i + batch_size]).astype(np.float32)
            )
            outs.append(model.embed(x))
    return torch.cat(outs) if outs else torch.zeros(0, model.head.embed_dim)


def imprint_and_infer(
    model: CorrectionModel,
    manifest: DatasetManifest,
    split: KShotSplit,
    detections,
    images,
    config: TrainConfig,
) -> CorrectionModel:
    """Write novel weight rows from the k shot crops (ground-truth boxes
    cropped directly, no jitter) and re-infer the background row from
    background proposals pooled over base-side and novel-side images.
    Returns a new model; base-class rows are untouched.
    """
    images_float = {k: to_float_image(v) for k, v in images.items()}
    selected = set(split.selected_novel_annotation_ids)
    shots_by_class: dict[int, list[np.ndarray]] = {}
    for ann in manifest.annotations:
        if ann.id not in selected:
            continue
        crop = sampling.crop_and_resize(
            images_float[ann.image_id], ann.box, config.crop_size
        )
        shots_by_class.setdefault(ann.class_id, []).append(crop)
    missing = split.novel_class_ids - set(shots_by_class)
    if missing:
        raise ValueError(f"no shots supplied for novel classes {sorted(missing)}")

    head = model.head
    embeddings = {
        c: _embed_crops(model, crops) for c, crops in shots_by_class.items()
    }
    head = imprint_novel_weights(head, embeddings)

    # Background pool: background-group proposals, balanced over the two
    # image sides (novel side = images containing a selected shot).
    visible = _visible_annotations(manifest, split, phase=2)
    gts_by_image = _by_image(visible)
    dets_by_image = detections_by_image(detections)
    novel_side = {a.image_id for a in manifest.annotations if a.id in selected}
    pools: dict[str, list[np.ndarray]] = {"base": [], "novel": []}
    for rec in manifest.images:
        side = "novel" if rec.id in novel_side else "base"
        dets = sampling.top_by_score(dets_by_image.get(rec.id, []), config.top_per_image)
        if not dets:
            continue
        table = sampling.group_proposals(
            dets, gts_by_image.get(rec.id, []), manifest.num_classes,
            config.fg_iou, config.bg_iou,
        )
        for det, (group, _) in zip(dets, table):
            if group != sampling.BACKGROUND:
                continue
            if det.box.width < 1.0 or det.box.height < 1.0:
                continue
            pools[side].append(
                sampling.crop_and_resize(
                    images_float[rec.id], det.box, config.crop_size
                )
            )
    rng = substream(config.seed, "bgpool")
    sampled = {}
    for side in ("base", "novel"):
        pool = pools[side]
        if len(pool) > config.bg_pool_per_source:
            idx = rng.choice(len(pool), size=config.bg_pool_per_source, replace=False)
            pool = [pool[i] for i in sorted(idx)]
        sampled[side] = pool
    base_emb = _embed_crops(model, sampled["base"])
    novel_emb = _embed_crops(model, sampled["novel"])
    head = infer_background_weight(head, base_emb, novel_emb)
    return model.with_head(head)


def train_phase2(
    model: CorrectionModel,
    manifest: DatasetManifest,
    split: KShotSplit,
    detections,
    images,
    config: TrainConfig,
) -> tuple[CorrectionModel, TrainReport]:
    """Fine-tune an imprinted model on the union of base annotations and
    the selected novel shots, oversampling novel-containing images; the
    separation hinge is active. The selected ground-truth shots are also
    injected as jittered foreground crops (`gt_shot_copies` per image
    appearance), since a degraded detector may propose few correctly
    labeled novel boxes.
    """
    _apply_determinism(config)
    import copy

    model = copy.deepcopy(model)
    report = _run_phase(
        model, manifest, detections, images, config, phase=2, split=split
    )
    return model, report
