"""Dataset manifests, ground-truth annotations, k-shot splits and detection IO.

Wire formats (JSON, floats at full precision):

* manifest: ``{"images": [{"id", "width", "height", "source"}],
  "annotations": [{"id", "image_id", "bbox": [x, y, w, h], "class_id"}],
  "classes": [str, ...]}``
* detections: ``[{"image_id", "bbox": [x, y, w, h], "scores": [K floats]}]``
  with an optional ``lscn_probs`` field on refined records.

Boxes travel as (x, y, width, height) and are held internally in corner
form. Background is not a manifest class; the correction model appends it
as class index K.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from detrefine.geometry import BoundingBox
from detrefine.rng import substream

log = logging.getLogger(__name__)


class SchemaError(ValueError):
    """A record violated the data schema or a manifest invariant."""


@dataclass(frozen=True)
class ImageRecord:
    id: str
    width: int
    height: int
    source: str


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: str
    box: BoundingBox
    class_id: int


@dataclass
class DatasetManifest:
    """Images, their ground-truth annotations and the class-name list.

    Validated on construction: image ids unique, every annotation resolves
    to an image, class ids declared, boxes valid and inside the image.
    """

    images: list[ImageRecord]
    annotations: list[Annotation]
    class_names: list[str]
    _by_image: dict[str, list[Annotation]] = field(
        init=False, repr=False, compare=False, default_factory=dict
    )

    def __post_init__(self):
        images_by_id = {}
        for rec in self.images:
            if rec.id in images_by_id:
                raise SchemaError(f"duplicate image id {rec.id!r}")
            images_by_id[rec.id] = rec
        n_classes = len(self.class_names)
        for ann in self.annotations:
            if ann.image_id not in images_by_id:
                raise SchemaError(
                    f"annotation {ann.id} references unknown image {ann.image_id!r}"
                )
            if not 0 <= ann.class_id < n_classes:
                raise SchemaError(
                    f"annotation {ann.id} has class_id {ann.class_id} "
                    f"outside [0, {n_classes})"
                )
            if not ann.box.is_valid():
                raise SchemaError(f"annotation {ann.id} has an invalid box {ann.box}")
            rec = images_by_id[ann.image_id]
            if not (
                0 <= ann.box.x1
                and ann.box.x2 <= rec.width
                and 0 <= ann.box.y1
                and ann.box.y2 <= rec.height
            ):
                raise SchemaError(
                    f"annotation {ann.id} box {ann.box} exceeds image "
                    f"{rec.id!r} extent {rec.width}x{rec.height}"
                )
        self._images_by_id = images_by_id
        by_image = {rec.id: [] for rec in self.images}
        for ann in self.annotations:
            by_image[ann.image_id].append(ann)
        self._by_image = by_image

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def image(self, image_id: str) -> ImageRecord:
        return self._images_by_id[image_id]

    def annotations_for_image(self, image_id: str) -> list[Annotation]:
        return self._by_image.get(image_id, [])

    def class_ids(self) -> set[int]:
        return set(range(self.num_classes))


@dataclass(frozen=True)
class Detection:
    """A detector output: box plus a per-class confidence vector in [0, 1]."""

    image_id: str
    box: BoundingBox
    scores: tuple[float, ...]

    @property
    def argmax_class(self) -> int:
        return int(np.argmax(self.scores))

    @property
    def confidence(self) -> float:
        return float(max(self.scores))


@dataclass(frozen=True)
class KShotSplit:
    """Base/novel class partition plus the selected novel annotation ids."""

    base_class_ids: frozenset[int]
    novel_class_ids: frozenset[int]
    k: int
    selected_novel_annotation_ids: tuple[int, ...]

    def __post_init__(self):
        if self.base_class_ids & self.novel_class_ids:
            raise SchemaError("base and novel class sets overlap")


def make_kshot_split(
    manifest: DatasetManifest,
    novel_class_ids: Iterable[int],
    k: int,
    seed: int,
) -> KShotSplit:
    """Select min(k, available) annotations uniformly per novel class.

    A pure function of (manifest, k, seed): per-class substreams make the
    selection independent of class iteration order. Selecting fewer than k
    (class under-annotated) logs a warning instead of failing.
    """
    novel = set(int(c) for c in novel_class_ids)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    unknown = novel - manifest.class_ids()
    if unknown:
        raise SchemaError(f"unknown novel class ids {sorted(unknown)}")
    base = manifest.class_ids() - novel
    selected: list[int] = []
    for class_id in sorted(novel):
        pool = sorted(a.id for a in manifest.annotations if a.class_id == class_id)
        if len(pool) <= k:
            if len(pool) < k:
                log.warning(
                    "class %d has only %d annotations for k=%d; taking all",
                    class_id,
                    len(pool),
                    k,
                )
            chosen = pool
        else:
            rng = substream(seed, "kshot", class_id)
            idx = rng.choice(len(pool), size=k, replace=False)
            chosen = sorted(pool[i] for i in idx)
        selected.extend(chosen)
    return KShotSplit(
        base_class_ids=frozenset(base),
        novel_class_ids=frozenset(novel),
        k=k,
        selected_novel_annotation_ids=tuple(selected),
    )


# ---------------------------------------------------------------------------
# JSON wire formats


def _require(record: Mapping, key: str, context: str):
    if key not in record:
        raise SchemaError(f"{context}: missing field {key!r}")
    return record[key]


def _bbox_from_wire(raw, context: str) -> BoundingBox:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise SchemaError(f"{context}: bbox must be [x, y, w, h], got {raw!r}")
    x, y, w, h = (float(v) for v in raw)
    if w < 0 or h < 0:
        raise SchemaError(f"{context}: negative bbox size {raw!r}")
    return BoundingBox.from_xywh(x, y, w, h)


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    return {
        "images": [
            {"id": r.id, "width": r.width, "height": r.height, "source": r.source}
            for r in manifest.images
        ],
        "annotations": [
            {
                "id": a.id,
                "image_id": a.image_id,
                "bbox": a.box.as_xywh(),
                "class_id": a.class_id,
            }
            for a in manifest.annotations
        ],
        "classes": list(manifest.class_names),
    }


def manifest_from_dict(payload: Mapping) -> DatasetManifest:
    images = []
    for raw in _require(payload, "images", "manifest"):
        ctx = f"image record {raw.get('id', '?')!r}"
        images.append(
            ImageRecord(
                id=str(_require(raw, "id", ctx)),
                width=int(_require(raw, "width", ctx)),
                height=int(_require(raw, "height", ctx)),
                source=str(_require(raw, "source", ctx)),
            )
        )
    annotations = []
    for raw in _require(payload, "annotations", "manifest"):
        ctx = f"annotation {raw.get('id', '?')}"
        annotations.append(
            Annotation(
                id=int(_require(raw, "id", ctx)),
                image_id=str(_require(raw, "image_id", ctx)),
                box=_bbox_from_wire(_require(raw, "bbox", ctx), ctx),
                class_id=int(_require(raw, "class_id", ctx)),
            )
        )
    classes = [str(c) for c in _require(payload, "classes", "manifest")]
    return DatasetManifest(images=images, annotations=annotations, class_names=classes)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest_to_dict(manifest), indent=2) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return manifest_from_dict(payload)


def detections_to_records(detections: Sequence[Detection]) -> list[dict]:
    return [
        {
            "image_id": d.image_id,
            "bbox": d.box.as_xywh(),
            "scores": [float(s) for s in d.scores],
        }
        for d in detections
    ]


def save_detections(detections: Sequence[Detection], path: str | Path) -> None:
    Path(path).write_text(json.dumps(detections_to_records(detections)) + "\n")


def load_detections(path: str | Path, manifest: DatasetManifest) -> list[Detection]:
    """Load and validate a detections file against the manifest.

    Rejects scores outside [0, 1], wrong score-vector length and unknown
    image ids. Extra fields (e.g. ``lscn_probs`` on refined records) are
    ignored.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(payload, list):
        raise SchemaError(f"{path}: detections file must be a JSON array")
    out = []
    known = {rec.id for rec in manifest.images}
    for i, raw in enumerate(payload):
        ctx = f"detection {i}"
        image_id = str(_require(raw, "image_id", ctx))
        if image_id not in known:
            raise SchemaError(f"{ctx}: unknown image id {image_id!r}")
        scores = [float(s) for s in _require(raw, "scores", ctx)]
        if len(scores) != manifest.num_classes:
            raise SchemaError(
                f"{ctx}: expected {manifest.num_classes} scores, got {len(scores)}"
            )
        bad = [s for s in scores if not 0.0 <= s <= 1.0]
        if bad:
            raise SchemaError(f"{ctx}: score {bad[0]} outside [0, 1]")
        box = _bbox_from_wire(_require(raw, "bbox", ctx), ctx)
        out.append(Detection(image_id=image_id, box=box, scores=tuple(scores)))
    return out


def detections_by_image(detections: Sequence[Detection]) -> dict[str, list[Detection]]:
    grouped: dict[str, list[Detection]] = {}
    for det in detections:
        grouped.setdefault(det.image_id, []).append(det)
    return grouped


def split_to_dict(split: KShotSplit) -> dict:
    return {
        "base_class_ids": sorted(split.base_class_ids),
        "novel_class_ids": sorted(split.novel_class_ids),
        "k": split.k,
        "selected_novel_annotation_ids": list(split.selected_novel_annotation_ids),
    }


def save_split(split: KShotSplit, path: str | Path) -> None:
    Path(path).write_text(json.dumps(split_to_dict(split), indent=2) + "\n")


def load_split(path: str | Path) -> KShotSplit:
    payload = json.loads(Path(path).read_text())
    return KShotSplit(
        base_class_ids=frozenset(int(c) for c in payload["base_class_ids"]),
        novel_class_ids=frozenset(int(c) for c in payload["novel_class_ids"]),
        k=int(payload["k"]),
        selected_novel_annotation_ids=tuple(
            int(a) for a in payload["selected_novel_annotation_ids"]
        ),
    )


def merge_manifests(a: DatasetManifest, b: DatasetManifest) -> DatasetManifest:
    """Union of two pools over identical class lists.

    Image ids must be disjoint; `b`'s annotation ids are shifted past
    `a`'s to keep ids unique in the union.
    """
    if a.class_names != b.class_names:
        raise SchemaError("cannot merge manifests with different class lists")
    overlap = {r.id for r in a.images} & {r.id for r in b.images}
    if overlap:
        raise SchemaError(f"duplicate image ids in merge: {sorted(overlap)[:3]}")
    offset = max((ann.id for ann in a.annotations), default=-1) + 1 - min(
        (ann.id for ann in b.annotations), default=0
    )
    shifted = [
        Annotation(id=ann.id + offset, image_id=ann.image_id, box=ann.box,
                   class_id=ann.class_id)
        for ann in b.annotations
    ]
    return DatasetManifest(
        images=list(a.images) + list(b.images),
        annotations=list(a.annotations) + shifted,
        class_names=list(a.class_names),
    )


def to_float_image(image: np.ndarray) -> np.ndarray:
    """uint8 images to float32 in [0, 1]; float images pass through."""
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return image


def load_images(manifest: DatasetManifest, root: str | Path) -> dict[str, np.ndarray]:
    """Load every manifest image as a uint8 (H, W, 3) array.

    `source` paths are resolved relative to `root`.
    """
    from PIL import Image

    root = Path(root)
    images = {}
    for rec in manifest.images:
        path = root / rec.source
        if not path.exists():
            raise SchemaError(f"image {rec.id!r}: file {path} does not exist")
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
        if arr.shape[:2] != (rec.height, rec.width):
            raise SchemaError(
                f"image {rec.id!r}: file is {arr.shape[1]}x{arr.shape[0]}, "
                f"manifest says {rec.width}x{rec.height}"
            )
        images[rec.id] = arr
    return images
