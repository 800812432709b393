"""Independent reference implementations used to check the library.

These deliberately recompute everything from scratch (per-cutoff matching,
suffix-scanned precision envelopes, materialized pairwise attention, central
finite differences) rather than sharing code with the production paths.
"""

from __future__ import annotations

import numpy as np

from detrefine.data import Annotation, Detection
from detrefine.geometry import iou


def _match_count(ranked_prefix, class_gts, iou_threshold):
    used: set[int] = set()
    tp = 0
    for det in ranked_prefix:
        best_iou, best_idx = 0.0, None
        for gi, ann in enumerate(class_gts):
            if gi in used or ann.image_id != det.image_id:
                continue
            v = iou(det.box, ann.box)
            if v > best_iou:
                best_iou, best_idx = v, gi
        if best_idx is not None and best_iou >= iou_threshold:
            used.add(best_idx)
            tp += 1
    return tp


def ap_exhaustive(dets, gts, class_id, iou_threshold):
    """AP by enumerating every score cutoff and rematching from scratch."""
    class_gts = [a for a in gts if a.class_id == class_id]
    if not class_gts:
        return None
    cand = [
        (i, d)
        for i, d in enumerate(dets)
        if d.confidence > 0.0 and d.argmax_class == class_id
    ]
    cand.sort(key=lambda pair: (-pair[1].confidence, pair[0]))
    ranked = [d for _, d in cand]
    if not ranked:
        return 0.0
    n_gt = len(class_gts)
    recalls, precisions = [], []
    for k in range(1, len(ranked) + 1):
        tp = _match_count(ranked[:k], class_gts, iou_threshold)
        recalls.append(tp / n_gt)
        precisions.append(tp / k)
    ap = 0.0
    prev = 0.0
    for i, r in enumerate(recalls):
        if r > prev:
            ap += (r - prev) * max(precisions[i:])
            prev = r
    return ap


def random_detection_instance(rng, max_dets=20, max_gts=10, n_classes=3, n_images=2):
    """A random (detections, annotations) pair on a 100x100 canvas."""
    image_ids = [f"im{i}" for i in range(n_images)]
    gts = []
    for gi in range(int(rng.integers(0, max_gts + 1))):
        x = rng.uniform(0, 60)
        y = rng.uniform(0, 60)
        w = rng.uniform(5, 40)
        h = rng.uniform(5, 40)
        gts.append(
            Annotation(
                id=gi,
                image_id=str(rng.choice(image_ids)),
                box=_box(x, y, w, h),
                class_id=int(rng.integers(n_classes)),
            )
        )
    dets = []
    for _ in range(int(rng.integers(0, max_dets + 1))):
        if gts and rng.random() < 0.6:
            ann = gts[int(rng.integers(len(gts)))]
            jitter = rng.normal(0, 4, size=4)
            box = _box(
                ann.box.x1 + jitter[0],
                ann.box.y1 + jitter[1],
                max(ann.box.width + jitter[2], 1.0),
                max(ann.box.height + jitter[3], 1.0),
            )
            image_id = ann.image_id
        else:
            box = _box(rng.uniform(0, 60), rng.uniform(0, 60),
                       rng.uniform(5, 40), rng.uniform(5, 40))
            image_id = str(rng.choice(image_ids))
        scores = rng.uniform(0.0, 1.0, size=n_classes)
        dets.append(Detection(image_id=image_id, box=box, scores=tuple(scores)))
    return dets, gts


def _box(x, y, w, h):
    from detrefine.geometry import BoundingBox

    return BoundingBox(float(x), float(y), float(x + w), float(y + h))


def central_difference_gradient(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a
    time, at 64-bit precision."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max relative error with an absolute floor for near-zero entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
