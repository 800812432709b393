"""Synthetic shapes dataset and a parameterized base-detector simulator.

The generator renders colored shapes (disk / square / triangle / ring in
distinct hues) over cluttered noisy backgrounds: classes are separable but
confusable at small scales, and everything is CPU-cheap and reproducible.
The detector simulator replays the output statistics of a two-stage
detector: jittered boxes, a class-confusion matrix for the argmax label,
soft Dirichlet score vectors with a background remainder, misses, and
Poisson-injected false positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from detrefine import geometry
from detrefine.data import Annotation, DatasetManifest, Detection, ImageRecord
from detrefine.rng import substream

SHAPE_NAMES = ("disk", "square", "triangle", "ring")

_HUES = (
    ("red", (0.82, 0.12, 0.12)),
    ("green", (0.10, 0.65, 0.18)),
    ("blue", (0.15, 0.25, 0.80)),
    ("yellow", (0.88, 0.78, 0.10)),
    ("purple", (0.55, 0.15, 0.70)),
    ("cyan", (0.10, 0.70, 0.75)),
    ("orange", (0.90, 0.45, 0.08)),
    ("magenta", (0.85, 0.15, 0.55)),
)

MAX_CLASSES = len(SHAPE_NAMES) * len(_HUES)

# Box coordinates are snapped to this grid before serialization so the
# (x, y, w, h) wire format round-trips bit-exactly.
COORD_QUANTUM = 1.0 / 1024.0


def class_visuals(class_id: int) -> tuple[str, str, tuple[float, float, float]]:
    """(shape_name, hue_name, rgb) for a class id.

    Classes enumerate shape-within-hue, so any contiguous prefix of ids
    covers all shapes and the ids of one hue are spread apart.
    """
    shape = SHAPE_NAMES[class_id % len(SHAPE_NAMES)]
    hue_name, rgb = _HUES[class_id // len(SHAPE_NAMES)]
    return shape, hue_name, rgb


def class_names(n_classes: int) -> list[str]:
    return [
        f"{class_visuals(c)[1]}_{class_visuals(c)[0]}" for c in range(n_classes)
    ]


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the rendered scenes."""

    canvas_width: int = 128
    canvas_height: int = 128
    n_classes: int = 12
    min_objects: int = 2
    max_objects: int = 5
    min_object_size: int = 24
    max_object_size: int = 56
    clutter_blobs: float = 5.0
    pixel_noise: float = 0.04
    texture_noise: float = 0.08
    # Relative sampling weight per class; None means uniform.
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.n_classes > MAX_CLASSES:
            raise ValueError(f"palette supports at most {MAX_CLASSES} classes")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("object count range is invalid")
        if not 2 <= self.min_object_size <= self.max_object_size:
            raise ValueError("object size range is invalid")
        if self.class_weights is not None and len(self.class_weights) != self.n_classes:
            raise ValueError("class_weights length must equal n_classes")

    def class_probabilities(self) -> np.ndarray:
        if self.class_weights is None:
            return np.full(self.n_classes, 1.0 / self.n_classes)
        w = np.asarray(self.class_weights, dtype=np.float64)
        return w / w.sum()


def _shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    # Normalized coordinates in [-1, 1] over the box.
    u = (xx - (w - 1) / 2.0) / max((w - 1) / 2.0, 0.5)
    v = (yy - (h - 1) / 2.0) / max((h - 1) / 2.0, 0.5)
    if shape == "disk":
        return u * u + v * v <= 1.0
    if shape == "square":
        return np.ones((h, w), dtype=bool)
    if shape == "triangle":
        # Apex at top center, base along the bottom edge.
        return (v >= -1.0) & (v - 2.0 * u <= 1.0) & (v + 2.0 * u <= 1.0)
    if shape == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.30)
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(
    spec: SceneSpec, rng: np.random.Generator
) -> tuple[np.ndarray, list[tuple[int, geometry.BoundingBox]]]:
    """Render one scene; returns (uint8 HxWx3 image, [(class_id, box)])."""
    H, W = spec.canvas_height, spec.canvas_width
    base = rng.uniform(0.42, 0.62)
    img = np.full((H, W, 3), base, dtype=np.float64)
    img += spec.pixel_noise * rng.standard_normal((H, W, 3))

    n_clutter = rng.poisson(spec.clutter_blobs)
    for _ in range(n_clutter):
        cw = int(rng.integers(6, 30))
        ch = int(rng.integers(6, 30))
        x0 = int(rng.integers(0, max(W - cw, 1)))
        y0 = int(rng.integers(0, max(H - ch, 1)))
        color = rng.uniform(0.30, 0.72, size=3)
        color = 0.6 * color + 0.4 * color.mean()  # desaturate
        mask = _shape_mask("disk", ch, cw)
        region = img[y0 : y0 + ch, x0 : x0 + cw]
        region[mask] = 0.5 * region[mask] + 0.5 * color

    objects: list[tuple[int, geometry.BoundingBox]] = []
    probs = spec.class_probabilities()
    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(n_objects):
        class_id = int(rng.choice(spec.n_classes, p=probs))
        shape, _, rgb = class_visuals(class_id)
        for _attempt in range(12):
            w = int(rng.integers(spec.min_object_size, spec.max_object_size + 1))
            h = int(np.clip(int(w * rng.uniform(0.75, 1.33)),
                            spec.min_object_size, spec.max_object_size))
            x0 = int(rng.integers(1, W - w))
            y0 = int(rng.integers(1, H - h))
            box = geometry.BoundingBox(float(x0), float(y0), float(x0 + w), float(y0 + h))
            if all(geometry.iou(box, prev) <= 0.35 for _, prev in objects):
                break
        else:
            continue  # crowded scene; drop this object
        mask = _shape_mask(shape, h, w)
        brightness = rng.uniform(0.82, 1.18)
        texture = spec.texture_noise * rng.standard_normal((h, w, 3))
        patch = np.asarray(rgb)[None, None, :] * brightness + texture
        region = img[y0 : y0 + h, x0 : x0 + w]
        region[mask] = patch[mask]
        objects.append((class_id, box))

    img = np.clip(img, 0.0, 1.0)
    return (img * 255.0).round().astype(np.uint8), objects


def generate_dataset(
    spec: SceneSpec, n_images: int, seed: int, image_id_prefix: str = "img"
) -> tuple[DatasetManifest, dict[str, np.ndarray]]:
    """Render `n_images` scenes deterministically from `seed`.

    Each image gets its own random substream, so generation order does not
    matter. Returns the manifest plus the rendered uint8 images keyed by
    image id; `write_images` persists them as PNGs. Distinct id prefixes
    let generated pools be merged into one manifest.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    margin = 2
    if spec.max_object_size + margin > min(spec.canvas_width, spec.canvas_height):
        raise ValueError(
            f"canvas {spec.canvas_width}x{spec.canvas_height} too small for "
            f"objects of size {spec.max_object_size}"
        )
    images: list[ImageRecord] = []
    annotations: list[Annotation] = []
    pixels: dict[str, np.ndarray] = {}
    ann_id = 0
    for idx in range(n_images):
        image_id = f"{image_id_prefix}_{idx:05d}"
        rng = substream(seed, "scene", idx)
        array, objects = render_scene(spec, rng)
        pixels[image_id] = array
        images.append(
            ImageRecord(
                id=image_id,
                width=spec.canvas_width,
                height=spec.canvas_height,
                source=f"images/{image_id}.png",
            )
        )
        for class_id, box in objects:
            annotations.append(
                Annotation(id=ann_id, image_id=image_id, box=box, class_id=class_id)
            )
            ann_id += 1
    manifest = DatasetManifest(
        images=images,
        annotations=annotations,
        class_names=class_names(spec.n_classes),
    )
    return manifest, pixels


def write_images(pixels, manifest: DatasetManifest, out_dir) -> None:
    """Write rendered images as PNGs under `out_dir` per manifest sources."""
    from pathlib import Path

    from PIL import Image

    out_dir = Path(out_dir)
    for rec in manifest.images:
        path = out_dir / rec.source
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels[rec.id]).save(path)


# ---------------------------------------------------------------------------
# Detector simulator


@dataclass(frozen=True)
class DetectorNoise:
    """Failure-mode model of the base detector.

    `confusion` is a row-stochastic KxK matrix: row c gives the argmax-label
    distribution for detections of true class c. `bg_mass` (scalar or
    per-class) is the expected share of score mass lost to an implicit
    background channel, so foreground scores sum to <= 1.
    """

    confusion: np.ndarray
    jitter_scale: float | None = 20.0
    miss_rate: float = 0.0
    fp_rate: float = 0.0
    score_concentration: float = 30.0
    bg_mass: float | np.ndarray = 0.12
    fp_bg_mass: float = 0.35

    def __post_init__(self):
        c = np.asarray(self.confusion, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion must be square, got shape {c.shape}")
        if np.any(c < 0) or not np.allclose(c.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("confusion rows must be nonnegative and sum to 1")
        object.__setattr__(self, "confusion", c)
        if self.jitter_scale is not None and self.jitter_scale <= 0:
            raise ValueError("jitter_scale must be positive or None")
        if not 0.0 <= self.miss_rate <= 1.0:
            raise ValueError("miss_rate must be in [0, 1]")
        if self.fp_rate < 0:
            raise ValueError("fp_rate must be >= 0")
        if self.score_concentration <= 0:
            raise ValueError("score_concentration must be > 0")
        bg = np.broadcast_to(np.asarray(self.bg_mass, dtype=np.float64), (c.shape[0],))
        if np.any(bg < 0) or np.any(bg >= 1):
            raise ValueError("bg_mass entries must be in [0, 1)")
        object.__setattr__(self, "bg_mass", np.array(bg))

    @property
    def n_classes(self) -> int:
        return self.confusion.shape[0]


def noiseless(n_classes: int) -> DetectorNoise:
    """Perfect detector: exact boxes, correct argmax, no misses, no extras."""
    return DetectorNoise(
        confusion=np.eye(n_classes),
        jitter_scale=None,
        miss_rate=0.0,
        fp_rate=0.0,
        score_concentration=60.0,
        bg_mass=0.05,
    )


def degraded_novel_noise(
    n_classes: int,
    novel_class_ids,
    *,
    base_diag: float = 0.90,
    novel_diag: float = 0.25,
    jitter_scale: float = 20.0,
    miss_rate: float = 0.05,
    fp_rate: float = 1.0,
    score_concentration: float = 30.0,
    base_bg_mass: float = 0.12,
    novel_bg_mass: float = 0.50,
) -> DetectorNoise:
    """Detector whose localization is healthy but whose classification
    collapses on the novel classes: low diagonal confusion and a large
    background share for novel rows, identical box jitter for everyone.
    """
    novel = set(int(c) for c in novel_class_ids)
    confusion = np.zeros((n_classes, n_classes))
    bg = np.full(n_classes, base_bg_mass)
    for c in range(n_classes):
        diag = novel_diag if c in novel else base_diag
        confusion[c, :] = (1.0 - diag) / (n_classes - 1)
        confusion[c, c] = diag
        if c in novel:
            bg[c] = novel_bg_mass
    return DetectorNoise(
        confusion=confusion,
        jitter_scale=jitter_scale,
        miss_rate=miss_rate,
        fp_rate=fp_rate,
        score_concentration=score_concentration,
        bg_mass=bg,
    )


def _quantize_box(box: geometry.BoundingBox) -> geometry.BoundingBox:
    q = COORD_QUANTUM
    return geometry.BoundingBox(
        round(box.x1 / q) * q,
        round(box.y1 / q) * q,
        round(box.x2 / q) * q,
        round(box.y2 / q) * q,
    )


def _draw_scores(
    rng: np.random.Generator,
    argmax_class: int,
    n_classes: int,
    concentration: float,
    bg_mass: float,
) -> np.ndarray:
    """Soft score vector over K foreground classes summing to <= 1.

    Drawn as a Dirichlet over K foreground entries plus one background
    entry (dropped), centered so `argmax_class` carries most foreground
    mass; the argmax is then enforced by swapping, which preserves the
    sampled values.
    """
    fg_mass = 1.0 - bg_mass
    direction = np.empty(n_classes + 1)
    if n_classes > 1:
        direction[:n_classes] = 0.15 * fg_mass / (n_classes - 1)
    direction[argmax_class] = 0.85 * fg_mass
    direction[n_classes] = bg_mass
    alpha = concentration * direction + 1e-2
    sample = rng.dirichlet(alpha)
    scores = sample[:n_classes].copy()
    j = int(np.argmax(scores))
    if j != argmax_class:
        scores[argmax_class], scores[j] = scores[j], scores[argmax_class]
    return scores


def simulate_detections(
    manifest: DatasetManifest, noise: DetectorNoise, seed: int
) -> list[Detection]:
    """Emit one detection per non-missed ground-truth object plus injected
    false positives, with per-image random substreams keyed by image id.
    """
    K = manifest.num_classes
    if noise.n_classes != K:
        raise ValueError(
            f"noise is for {noise.n_classes} classes, manifest has {K}"
        )
    detections: list[Detection] = []
    for rec in manifest.images:
        rng = substream(seed, "detector", rec.id)
        for ann in manifest.annotations_for_image(rec.id):
            if rng.random() < noise.miss_rate:
                continue
            box = ann.box
            if noise.jitter_scale is not None:
                box = geometry.jitter_box(
                    box, noise.jitter_scale, rng, rec.width, rec.height
                )
            box = _quantize_box(box)
            label = int(rng.choice(K, p=noise.confusion[ann.class_id]))
            scores = _draw_scores(
                rng, label, K, noise.score_concentration,
                float(noise.bg_mass[ann.class_id]),
            )
            detections.append(
                Detection(image_id=rec.id, box=box, scores=tuple(float(s) for s in scores))
            )
        for _ in range(rng.poisson(noise.fp_rate)):
            w = rng.uniform(10.0, 0.45 * rec.width)
            h = rng.uniform(10.0, 0.45 * rec.height)
            x0 = rng.uniform(0.0, rec.width - w)
            y0 = rng.uniform(0.0, rec.height - h)
            box = _quantize_box(geometry.BoundingBox(x0, y0, x0 + w, y0 + h))
            label = int(rng.integers(K))
            scores = _draw_scores(
                rng, label, K, noise.score_concentration, noise.fp_bg_mass
            )
            detections.append(
                Detection(image_id=rec.id, box=box, scores=tuple(float(s) for s in scores))
            )
    return detections
