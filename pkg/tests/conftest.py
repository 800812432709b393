import numpy as np
import pytest

from detrefine.data import Annotation, DatasetManifest, ImageRecord
from detrefine.geometry import BoundingBox


@pytest.fixture
def tiny_manifest():
    """Two 100x100 images, three annotations over two classes."""
    return DatasetManifest(
        images=[
            ImageRecord(id="a", width=100, height=100, source="images/a.png"),
            ImageRecord(id="b", width=100, height=100, source="images/b.png"),
        ],
        annotations=[
            Annotation(id=0, image_id="a", box=BoundingBox(10, 10, 40, 40), class_id=0),
            Annotation(id=1, image_id="a", box=BoundingBox(50, 50, 90, 90), class_id=1),
            Annotation(id=2, image_id="b", box=BoundingBox(20, 30, 60, 80), class_id=0),
        ],
        class_names=["thing", "stuff"],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
