"""Inference-time refinement: score each final-stage box with the
correction model and fuse its class probabilities into the detector's
scores by element-wise multiplication.

Boxes are never modified and fused scores are never renormalized: the
background probability acts only by draining foreground mass inside the
softmax, so fusion can suppress but never inflate a score.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from detrefine.data import Detection, SchemaError, to_float_image
from detrefine.geometry import iou
from detrefine.model import CorrectionModel
from detrefine.sampling import crop_and_resize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefinedDetection:
    """A detection with correction probabilities and fused scores attached.

    `lscn_probs` is None (and `refined` False) when the box could not be
    cropped and the detection passed through untouched.
    """

    detection: Detection
    lscn_probs: tuple[float, ...] | None
    fused_scores: tuple[float, ...]
    refined: bool = True

    @property
    def box(self):
        return self.detection.box

    @property
    def image_id(self) -> str:
        return self.detection.image_id

    def as_detection(self) -> Detection:
        """The refined detection in plain Detection form (fused scores)."""
        return Detection(
            image_id=self.detection.image_id,
            box=self.detection.box,
            scores=self.fused_scores,
        )


def fuse_scores(base_scores, lscn_probs) -> np.ndarray:
    """Element-wise product of the K base scores with the first K of the
    K+1 correction probabilities."""
    base = np.asarray(base_scores, dtype=np.float64)
    probs = np.asarray(lscn_probs, dtype=np.float64)
    if probs.shape != (base.shape[0] + 1,):
        raise ValueError(
            f"expected {base.shape[0] + 1} probabilities for {base.shape[0]} "
            f"scores, got shape {probs.shape}"
        )
    if np.any(base < 0) or np.any(base > 1):
        raise ValueError("base scores must lie in [0, 1]")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-5:
        raise ValueError("lscn_probs must be a probability vector")
    return base * probs[:-1]


def refine_detections(
    image: np.ndarray,
    detections: Sequence[Detection],
    model: CorrectionModel,
    batch_size: int = 64,
    nms_iou: float | None = None,
) -> list[RefinedDetection]:
    """Refine one image's detections: crop each final-stage box (no
    jitter), softmax the cosine logits, fuse. Order and boxes are
    unchanged; a degenerate box passes through unrefined and flagged.

    `nms_iou` optionally applies class-wise greedy NMS on the fused
    scores afterwards, for detector outputs that were never suppressed.
    """
    if not detections:
        return []
    image_float = to_float_image(image)
    size = model.extractor_config.input_size
    crops, croppable = [], []
    for det in detections:
        try:
            crops.append(crop_and_resize(image_float, det.box, size))
            croppable.append(True)
        except ValueError:
            log.warning(
                "detection box %s in image %s cannot be cropped; passing through",
                det.box,
                det.image_id,
            )
            croppable.append(False)
    probs_iter = iter(_probabilities(model, crops, batch_size))
    refined = []
    for det, ok in zip(detections, croppable):
        if not ok:
            refined.append(
                RefinedDetection(
                    detection=det,
                    lscn_probs=None,
                    fused_scores=det.scores,
                    refined=False,
                )
            )
            continue
        probs = next(probs_iter)
        fused = fuse_scores(det.scores, probs)
        refined.append(
            RefinedDetection(
                detection=det,
                lscn_probs=tuple(float(p) for p in probs),
                fused_scores=tuple(float(s) for s in fused),
            )
        )
    if nms_iou is not None:
        refined = greedy_nms(refined, nms_iou)
    return refined


def _probabilities(model: CorrectionModel, crops, batch_size) -> np.ndarray:
    if not crops:
        return np.zeros((0, 1))
    was_training = model.training
    model.eval()
    try:
        outs = []
        with torch.no_grad():
            for i in range(0, len(crops), batch_size):
                x = torch.from_numpy(
                    np.stack(crops[i : i + batch_size]).astype(np.float32)
                )
                outs.append(model.probabilities(x).numpy())
        return np.concatenate(outs, axis=0)
    finally:
        model.train(was_training)


def greedy_nms(refined: Sequence[RefinedDetection], iou_threshold: float = 0.5):
    """Class-wise greedy suppression on fused scores (argmax class)."""
    order = sorted(
        range(len(refined)),
        key=lambda i: (-max(refined[i].fused_scores), i),
    )
    kept: list[int] = []
    for i in order:
        det_i = refined[i]
        class_i = int(np.argmax(det_i.fused_scores))
        suppressed = False
        for j in kept:
            det_j = refined[j]
            if int(np.argmax(det_j.fused_scores)) != class_i:
                continue
            if det_i.image_id != det_j.image_id:
                continue
            if iou(det_i.box, det_j.box) > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    kept.sort()
    return [refined[i] for i in kept]


def save_refined_detections(refined: Sequence[RefinedDetection], path) -> None:
    """Detections wire format plus an `lscn_probs` field per record;
    scores are the fused scores."""
    records = []
    for r in refined:
        records.append(
            {
                "image_id": r.image_id,
                "bbox": r.box.as_xywh(),
                "scores": [float(s) for s in r.fused_scores],
                "lscn_probs": None
                if r.lscn_probs is None
                else [float(p) for p in r.lscn_probs],
            }
        )
    Path(path).write_text(json.dumps(records) + "\n")
