"""Training-data construction from detector proposals: IoU-based grouping
into foreground / false positive / background, per-image group-quota
sampling, Gaussian box expansion and bilinear crop-and-resize.

Grouping rule (thresholds configurable): a proposal is foreground when it
overlaps its best ground-truth box at >= `fg_iou` AND claims that box's
class; a false positive when it overlaps at >= `fg_iou` with the wrong
class or lands in [`bg_iou`, `fg_iou`); background below `bg_iou`.
Foreground crops train as their matched class; false positives and
background both train as the background class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from detrefine import geometry
from detrefine.data import Annotation, Detection
from detrefine.rng import substream

log = logging.getLogger(__name__)

FOREGROUND = "foreground"
FALSE_POSITIVE = "false_positive"
BACKGROUND = "background"
GROUPS = (FOREGROUND, FALSE_POSITIVE, BACKGROUND)


@dataclass(frozen=True)
class ProposalCrop:
    image_id: str
    box: geometry.BoundingBox  # post-jitter source box
    group: str
    label: int  # training class id; K means background
    crop: np.ndarray  # (3, S, S)


def group_proposals(
    dets: Sequence[Detection],
    gts: Sequence[Annotation],
    n_classes: int,
    fg_iou: float = 0.5,
    bg_iou: float = 0.1,
) -> list[tuple[str, int]]:
    """(group, training label) per detection; label `n_classes` is background."""
    if not 0 <= bg_iou < fg_iou <= 1:
        raise ValueError(f"need 0 <= bg_iou < fg_iou <= 1, got {bg_iou}, {fg_iou}")
    out = []
    for det in dets:
        best_iou, best_class = 0.0, None
        for ann in gts:
            v = geometry.iou(det.box, ann.box)
            if v > best_iou:
                best_iou, best_class = v, ann.class_id
        if best_iou >= fg_iou and det.argmax_class == best_class:
            out.append((FOREGROUND, best_class))
        elif best_iou >= bg_iou:
            out.append((FALSE_POSITIVE, n_classes))
        else:
            out.append((BACKGROUND, n_classes))
    return out


def top_by_score(dets: Sequence[Detection], top: int) -> list[Detection]:
    """Highest-confidence `top` detections, ties broken by input order."""
    ranked = sorted(enumerate(dets), key=lambda pair: (-pair[1].confidence, pair[0]))
    return [d for _, d in ranked[:top]]


def group_quotas(counts: Mapping[str, int], total: int) -> dict[str, int]:
    """Per-group sample quotas: floor(total/3) each with the remainder on
    false positives; an empty group's quota is redistributed equally over
    the nonempty groups (leftovers in fixed group order)."""
    quotas = {
        FOREGROUND: total // 3,
        FALSE_POSITIVE: total // 3 + total % 3,
        BACKGROUND: total // 3,
    }
    nonempty = [g for g in GROUPS if counts.get(g, 0) > 0]
    if not nonempty:
        return {g: 0 for g in GROUPS}
    for group in GROUPS:
        if counts.get(group, 0) == 0 and quotas[group] > 0:
            share, extra = divmod(quotas[group], len(nonempty))
            quotas[group] = 0
            for i, g in enumerate(nonempty):
                quotas[g] += share + (1 if i < extra else 0)
    return quotas


def crop_and_resize(image: np.ndarray, box: geometry.BoundingBox, size: int) -> np.ndarray:
    """Bilinear crop of the box region at an size x size grid of sample
    points, with no quantization of the box coordinates.

    Sample j of a row sits at x1 + (j + 0.5) * width / size; pixel (r, c)
    of the image is treated as a point sample at (c + 0.5, r + 0.5), with
    edge values replicated outside the image. The crop keeps the image's
    native value range. Returns (3, size, size); float inputs keep their
    dtype, integer images come back as float32.
    """
    if not box.is_valid() or box.width <= 0 or box.height <= 0:
        raise ValueError(f"cannot crop zero-area box {box}")
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    h, w = image.shape[:2]
    xs = box.x1 + (np.arange(size) + 0.5) * (box.width / size)
    ys = box.y1 + (np.arange(size) + 0.5) * (box.height / size)
    # Continuous coords -> fractional pixel indices (pixel centers at +0.5).
    u = xs - 0.5
    v = ys - 0.5
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = u - x0
    fy = v - y0
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    fy_col = fy[:, None, None]
    fx_row = fx[None, :, None]
    top = image[y0c][:, x0c] * (1 - fx_row) + image[y0c][:, x1c] * fx_row
    bottom = image[y1c][:, x0c] * (1 - fx_row) + image[y1c][:, x1c] * fx_row
    crop = top * (1 - fy_col) + bottom * fy_col
    out_dtype = image.dtype if np.issubdtype(image.dtype, np.floating) else np.float32
    return np.ascontiguousarray(crop.transpose(2, 0, 1)).astype(out_dtype, copy=False)


def build_batch(
    image_records,
    images: Mapping[str, np.ndarray],
    dets_by_image: Mapping[str, Sequence[Detection]],
    gts_by_image: Mapping[str, Sequence[Annotation]],
    *,
    n_classes: int,
    boxes_per_image: int,
    crop_size: int,
    jitter_scale: float,
    seed: int,
    top_per_image: int = 300,
    fg_iou: float = 0.5,
    bg_iou: float = 0.1,
) -> list[ProposalCrop]:
    """At most `boxes_per_image` jittered crops per image, drawn with equal
    expected counts per nonempty group (with replacement when a group is
    smaller than its quota).

    Randomness comes from per-image substreams of `seed`, so the output is
    independent of image processing order. Images with no proposals
    contribute nothing (logged).
    """
    crops: list[ProposalCrop] = []
    for rec in image_records:
        dets = top_by_score(dets_by_image.get(rec.id, []), top_per_image)
        if not dets:
            log.debug("image %s has no proposals; skipping", rec.id)
            continue
        gts = gts_by_image.get(rec.id, [])
        assignments = group_proposals(dets, gts, n_classes, fg_iou, bg_iou)
        members: dict[str, list[int]] = {g: [] for g in GROUPS}
        for i, (group, _) in enumerate(assignments):
            members[group].append(i)
        quotas = group_quotas({g: len(m) for g, m in members.items()}, boxes_per_image)
        rng = substream(seed, "batch", rec.id)
        image = images[rec.id]
        for group in GROUPS:
            pool = members[group]
            quota = quotas[group]
            if quota == 0 or not pool:
                continue
            replace = len(pool) < quota
            chosen = rng.choice(len(pool), size=quota, replace=replace)
            for j in chosen:
                det_idx = pool[int(j)]
                det = dets[det_idx]
                _, label = assignments[det_idx]
                box = geometry.jitter_box(
                    det.box, jitter_scale, rng, rec.width, rec.height
                )
                if box.width < 1.0 or box.height < 1.0:
                    continue  # unrepairable degenerate proposal
                crops.append(
                    ProposalCrop(
                        image_id=rec.id,
                        box=box,
                        group=group,
                        label=label,
                        crop=crop_and_resize(image, box, crop_size),
                    )
                )
    return crops
