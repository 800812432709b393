"""Low-shot detection score refinement.

A small correction classifier is trained on crops of a base detector's
proposals (grouped into foreground / false positive / background) and its
class probabilities are fused into the detector's scores at inference,
suppressing false positives without touching the boxes.
"""

__version__ = "0.1.0"

from detrefine.geometry import BoundingBox, iou, jitter_box

__all__ = ["BoundingBox", "iou", "jitter_box", "__version__"]
