"""Axis-aligned box arithmetic: IoU, validity checks and Gaussian box jitter.

Boxes are corner-form (x1, y1, x2, y2) in continuous pixel coordinates;
areas are (x2 - x1) * (y2 - y1) with no +1 discretization, matching the
continuous crop-and-resize used downstream.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class BoundingBox:
    """Corner-form box. Valid when x2 >= x1 and y2 >= y1."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def area(self) -> float:
        return self.width * self.height

    def is_valid(self) -> bool:
        return self.x2 >= self.x1 and self.y2 >= self.y1

    def as_xywh(self) -> list[float]:
        return [self.x1, self.y1, self.width, self.height]

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BoundingBox":
        return cls(x, y, x + w, y + h)


def _require_valid(box: BoundingBox, name: str) -> None:
    if not box.is_valid():
        raise ValueError(f"invalid box {name}: {box}")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two valid boxes.

    Returns 0.0 when the union has zero area (two degenerate boxes).
    """
    _require_valid(a, "a")
    _require_valid(b, "b")
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = max(0.0, ix2 - ix1)
    ih = max(0.0, iy2 - iy1)
    inter = iw * ih
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return float(inter / union)


def jitter_box(
    box: BoundingBox,
    jitter_scale: float,
    rng,
    image_width: float,
    image_height: float,
    max_resample: int = 8,
) -> BoundingBox:
    """Perturb each corner coordinate with zero-mean Gaussian noise.

    The x-coordinates get std W / jitter_scale and the y-coordinates
    H / jitter_scale, so larger boxes move more in absolute terms. Draws
    happen in the fixed order (dx1, dx2, dy1, dy2) from `rng`, which only
    needs a ``normal(loc, scale)`` method (a numpy Generator works).

    The perturbed box is clipped to [0, image_width] x [0, image_height];
    inverted coordinates are swapped, and if the result is still thinner
    than 1 px in either dimension the jitter is resampled up to
    `max_resample` times before falling back to the input box unchanged.
    """
    if jitter_scale <= 0:
        raise ValueError(f"jitter_scale must be > 0, got {jitter_scale}")
    _require_valid(box, "box")
    sigma_x = box.width / jitter_scale
    sigma_y = box.height / jitter_scale
    for _ in range(max_resample):
        x1 = box.x1 + rng.normal(0.0, sigma_x)
        x2 = box.x2 + rng.normal(0.0, sigma_x)
        y1 = box.y1 + rng.normal(0.0, sigma_y)
        y2 = box.y2 + rng.normal(0.0, sigma_y)
        x1 = min(max(x1, 0.0), image_width)
        x2 = min(max(x2, 0.0), image_width)
        y1 = min(max(y1, 0.0), image_height)
        y2 = min(max(y2, 0.0), image_height)
        if x2 < x1:
            x1, x2 = x2, x1
        if y2 < y1:
            y1, y2 = y2, y1
        candidate = BoundingBox(x1, y1, x2, y2)
        # Degenerate boxes (< 1 px in either dimension) have no usable crop.
        if candidate.width >= 1.0 and candidate.height >= 1.0:
            return candidate
        if sigma_x == 0.0 and sigma_y == 0.0:
            break
    return box
