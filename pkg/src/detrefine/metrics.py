"""Detection metrics and diagnostics: average precision, per-split IoU
histograms, and the oracle false-positive correction curve.

Evaluation convention: a detection claims the class with the highest score
and that score is its confidence. Detections whose maximum score is zero
carry no class claim and are excluded, which is how oracle suppression
removes a detection without touching the list structure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from detrefine.data import Annotation, DatasetManifest, Detection, KShotSplit
from detrefine.geometry import iou


def _candidates(dets: Sequence[Detection], class_id: int) -> list[tuple[int, Detection]]:
    """Detections claiming `class_id`, ranked by confidence (ties keep input
    order), paired with their original index."""
    cand = [
        (i, d)
        for i, d in enumerate(dets)
        if d.confidence > 0.0 and d.argmax_class == class_id
    ]
    cand.sort(key=lambda pair: (-pair[1].confidence, pair[0]))
    return cand


def _match_flags(
    ranked: Sequence[Detection],
    gts_by_image: dict[str, list[Annotation]],
    iou_threshold: float,
) -> list[bool]:
    """Greedy one-to-one matching in rank order: each detection takes the
    highest-IoU still-unmatched ground-truth box of its image, and is a true
    positive when that IoU reaches the threshold."""
    matched: dict[str, set[int]] = {}
    flags = []
    for det in ranked:
        gts = gts_by_image.get(det.image_id, [])
        used = matched.setdefault(det.image_id, set())
        best_iou, best_idx = 0.0, None
        for gi, ann in enumerate(gts):
            if gi in used:
                continue
            v = iou(det.box, ann.box)
            if v > best_iou:
                best_iou, best_idx = v, gi
        if best_idx is not None and best_iou >= iou_threshold:
            used.add(best_idx)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _area_under_envelope(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """All-point interpolated AP: area under the precision envelope."""
    envelope = precisions.copy()
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    ap = 0.0
    prev = 0.0
    for r, p in zip(recalls, envelope):
        if r > prev:
            ap += (r - prev) * p
            prev = r
    return ap


def _eleven_point(recalls: np.ndarray, precisions: np.ndarray) -> float:
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        mask = recalls >= r
        ap += precisions[mask].max() if mask.any() else 0.0
    return ap / 11.0


def average_precision(
    dets: Sequence[Detection],
    gts: Sequence[Annotation],
    class_id: int,
    iou_threshold: float,
    *,
    interpolation: str = "all_point",
) -> float | None:
    """AP for one class at one IoU threshold.

    Returns None (absent) when the class has no ground truth; 0.0 when it
    has ground truth but no detections claim it.
    """
    class_gts = [a for a in gts if a.class_id == class_id]
    if not class_gts:
        return None
    cand = _candidates(dets, class_id)
    if not cand:
        return 0.0
    gts_by_image: dict[str, list[Annotation]] = {}
    for ann in class_gts:
        gts_by_image.setdefault(ann.image_id, []).append(ann)
    flags = _match_flags([d for _, d in cand], gts_by_image, iou_threshold)
    tp = np.cumsum(flags, dtype=np.float64)
    n = np.arange(1, len(flags) + 1, dtype=np.float64)
    recalls = tp / len(class_gts)
    precisions = tp / n
    if interpolation == "all_point":
        return float(_area_under_envelope(recalls, precisions))
    if interpolation == "11point":
        return float(_eleven_point(recalls, precisions))
    raise ValueError(f"unknown interpolation {interpolation!r}")


def _mean_ignoring_absent(values: Iterable[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    if not present:
        return None
    return float(np.mean(present))


@dataclass
class EvalReport:
    """Per-class AP per threshold plus base/novel/all means and diagnostics."""

    iou_thresholds: tuple[float, ...]
    per_class_ap: dict[float, dict[int, float | None]]
    mean_ap: dict[float, dict[str, float | None]]  # group -> mean ("all"/"base"/"novel")
    class_names: list[str]
    iou_histograms: dict | None = None
    oracle_curve: list[tuple[float, float | None]] | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "iou_thresholds": list(self.iou_thresholds),
            "per_class_ap": {
                str(t): {str(c): v for c, v in by_class.items()}
                for t, by_class in self.per_class_ap.items()
            },
            "mean_ap": {str(t): dict(groups) for t, groups in self.mean_ap.items()},
            "class_names": self.class_names,
            "iou_histograms": self.iou_histograms,
            "oracle_curve": self.oracle_curve,
            "extras": self.extras,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def evaluate(
    dets: Sequence[Detection],
    manifest: DatasetManifest,
    iou_thresholds: Sequence[float] = (0.5, 0.75),
    split: KShotSplit | None = None,
    interpolation: str = "all_point",
) -> EvalReport:
    per_class: dict[float, dict[int, float | None]] = {}
    means: dict[float, dict[str, float | None]] = {}
    for t in iou_thresholds:
        by_class = {
            c: average_precision(
                dets, manifest.annotations, c, t, interpolation=interpolation
            )
            for c in range(manifest.num_classes)
        }
        per_class[t] = by_class
        groups = {"all": _mean_ignoring_absent(by_class.values())}
        if split is not None:
            groups["base"] = _mean_ignoring_absent(
                by_class[c] for c in sorted(split.base_class_ids)
            )
            groups["novel"] = _mean_ignoring_absent(
                by_class[c] for c in sorted(split.novel_class_ids)
            )
        means[t] = groups
    return EvalReport(
        iou_thresholds=tuple(iou_thresholds),
        per_class_ap=per_class,
        mean_ap=means,
        class_names=list(manifest.class_names),
    )


# ---------------------------------------------------------------------------
# Diagnostics


def iou_histogram(
    dets: Sequence[Detection],
    manifest: DatasetManifest,
    split: KShotSplit,
    bins: int | Sequence[float] = 10,
) -> dict:
    """Histogram of each detection's max IoU against same-class ground
    truth, aggregated separately for base-class and novel-class claims."""
    edges = (
        np.linspace(0.0, 1.0, bins + 1)
        if isinstance(bins, int)
        else np.asarray(bins, dtype=np.float64)
    )
    if edges[0] != 0.0 or edges[-1] != 1.0 or np.any(np.diff(edges) <= 0):
        raise ValueError("bins must partition [0, 1]")
    values: dict[str, list[float]] = {"base": [], "novel": []}
    for det in dets:
        if det.confidence <= 0.0:
            continue
        c = det.argmax_class
        group = "novel" if c in split.novel_class_ids else "base"
        best = 0.0
        for ann in manifest.annotations_for_image(det.image_id):
            if ann.class_id == c:
                best = max(best, iou(det.box, ann.box))
        values[group].append(best)
    return {
        "edges": edges.tolist(),
        "base": np.histogram(values["base"], bins=edges)[0].tolist(),
        "novel": np.histogram(values["novel"], bins=edges)[0].tolist(),
    }


def _top_per_image(dets: Sequence[Detection], top: int) -> list[Detection]:
    by_image: dict[str, list[tuple[int, Detection]]] = {}
    for i, d in enumerate(dets):
        by_image.setdefault(d.image_id, []).append((i, d))
    kept = []
    for pairs in by_image.values():
        pairs.sort(key=lambda pair: (-pair[1].confidence, pair[0]))
        kept.extend(pairs[:top])
    kept.sort(key=lambda pair: pair[0])  # restore input order
    return [d for _, d in kept]


def oracle_correct(
    dets: Sequence[Detection],
    manifest: DatasetManifest,
    threshold: float,
    *,
    mode: str = "combined",
    correct_iou: float = 0.5,
) -> list[Detection]:
    """Apply the oracle at one threshold and return transformed detections.

    threshold == 0 disables the oracle entirely (identity). Otherwise any
    detection whose max IoU over all ground truth falls below `threshold`
    has its scores zeroed (suppression, both modes). In "combined" mode a
    detection that is accurately localized (max IoU >= `correct_iou`, the
    AP matching threshold being diagnosed) but claims the wrong class has
    its claimed mass moved onto the matched ground-truth class. Gating the
    correction at `correct_iou` rather than `threshold` keeps the curve
    non-decreasing for thresholds up to `correct_iou`: raising the
    threshold then only removes detections that could never match.
    """
    if mode not in ("combined", "suppress"):
        raise ValueError(f"unknown oracle mode {mode!r}")
    if threshold == 0.0:
        return list(dets)
    out = []
    for det in dets:
        best_iou, best_ann = 0.0, None
        for ann in manifest.annotations_for_image(det.image_id):
            v = iou(det.box, ann.box)
            if v > best_iou:
                best_iou, best_ann = v, ann
        if best_iou < threshold:
            out.append(
                Detection(det.image_id, det.box, tuple(0.0 for _ in det.scores))
            )
        elif (
            mode == "combined"
            and best_iou >= correct_iou
            and best_ann is not None
            and det.argmax_class != best_ann.class_id
        ):
            scores = list(det.scores)
            scores[best_ann.class_id] = min(
                1.0, scores[best_ann.class_id] + scores[det.argmax_class]
            )
            scores[det.argmax_class] = 0.0
            out.append(Detection(det.image_id, det.box, tuple(scores)))
        else:
            out.append(det)
    return out


def oracle_fp_curve(
    dets: Sequence[Detection],
    manifest: DatasetManifest,
    iou_thresholds: Sequence[float] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
    *,
    class_ids: Iterable[int] | None = None,
    ap_threshold: float = 0.5,
    top_per_image: int = 300,
    mode: str = "combined",
) -> list[tuple[float, float | None]]:
    """Mean AP at `ap_threshold` over `class_ids` after oracle-correcting
    the top detections per image at each threshold. The potential-gain
    diagnostic: how much better the detector would be if an oracle fixed
    its false positives."""
    if class_ids is None:
        class_ids = range(manifest.num_classes)
    class_ids = sorted(class_ids)
    base = _top_per_image(dets, top_per_image)
    curve = []
    for t in iou_thresholds:
        corrected = oracle_correct(
            base, manifest, t, mode=mode, correct_iou=ap_threshold
        )
        aps = [
            average_precision(corrected, manifest.annotations, c, ap_threshold)
            for c in class_ids
        ]
        curve.append((float(t), _mean_ignoring_absent(aps)))
    return curve
