import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detrefine.geometry import BoundingBox, iou, jitter_box


def iou_raster_oracle(a, b, cells=2000):
    """Rasterize both boxes on a fine grid and count cells."""
    lo_x = min(a.x1, b.x1)
    hi_x = max(a.x2, b.x2)
    lo_y = min(a.y1, b.y1)
    hi_y = max(a.y2, b.y2)
    xs = np.linspace(lo_x, hi_x, cells, endpoint=False) + (hi_x - lo_x) / (2 * cells)
    ys = np.linspace(lo_y, hi_y, cells, endpoint=False) + (hi_y - lo_y) / (2 * cells)
    xx, yy = np.meshgrid(xs, ys)
    in_a = (xx >= a.x1) & (xx <= a.x2) & (yy >= a.y1) & (yy <= a.y2)
    in_b = (xx >= b.x1) & (xx <= b.x2) & (yy >= b.y1) & (yy <= b.y2)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


class ZeroRng:
    def normal(self, loc, scale):
        return 0.0


finite_coord = st.floats(min_value=-500, max_value=500, allow_nan=False)


def box_strategy():
    return st.builds(
        lambda x1, y1, w, h: BoundingBox(x1, y1, x1 + w, y1 + h),
        finite_coord,
        finite_coord,
        st.floats(min_value=0, max_value=200),
        st.floats(min_value=0, max_value=200),
    )


class TestIou:
    def test_identity(self):
        b = BoundingBox(3.0, 4.0, 10.0, 12.0)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(5, 5, 6, 6)) == 0.0

    def test_partial_overlap_matches_raster_oracle(self):
        a = BoundingBox(0, 0, 2, 2)
        b = BoundingBox(1, 1, 3, 3)
        got = iou(a, b)
        assert got == pytest.approx(1 / 7, abs=1e-12)
        assert got == pytest.approx(iou_raster_oracle(a, b), abs=2e-3)

    def test_random_pairs_match_raster_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            x1, y1, x3, y3 = rng.uniform(0, 50, size=4)
            a = BoundingBox(x1, y1, x1 + rng.uniform(1, 30), y1 + rng.uniform(1, 30))
            b = BoundingBox(x3, y3, x3 + rng.uniform(1, 30), y3 + rng.uniform(1, 30))
            assert iou(a, b) == pytest.approx(iou_raster_oracle(a, b), abs=2e-3)

    def test_rejects_invalid_boxes(self):
        bad = BoundingBox(5, 0, 1, 1)
        good = BoundingBox(0, 0, 1, 1)
        with pytest.raises(ValueError):
            iou(bad, good)
        with pytest.raises(ValueError):
            iou(good, BoundingBox(0, 3, 1, 1))

    def test_both_degenerate_is_zero(self):
        a = BoundingBox(2, 2, 2, 2)
        assert iou(a, a) == 0.0

    @settings(max_examples=200, deadline=None)
    @given(box_strategy(), box_strategy())
    def test_symmetric_and_bounded(self, a, b):
        ab = iou(a, b)
        assert ab == iou(b, a)
        assert 0.0 <= ab <= 1.0

    @settings(max_examples=100, deadline=None)
    @given(box_strategy())
    def test_one_iff_identical(self, a):
        if a.area() > 0:
            assert iou(a, a) == 1.0
            shifted = BoundingBox(a.x1 + 0.5, a.y1, a.x2 + 0.5, a.y2)
            assert iou(a, shifted) < 1.0


class TestJitterBox:
    def test_zero_noise_is_identity(self):
        b = BoundingBox(10, 20, 50, 60)
        out = jitter_box(b, 10.0, ZeroRng(), 100, 100)
        assert out == b

    def test_rejects_nonpositive_scale(self):
        b = BoundingBox(0, 0, 10, 10)
        with pytest.raises(ValueError):
            jitter_box(b, 0.0, ZeroRng(), 100, 100)
        with pytest.raises(ValueError):
            jitter_box(b, -1.0, ZeroRng(), 100, 100)

    def test_delta_standard_deviation(self):
        # W = 100, jitter_scale = 10 -> std of dx1 should be ~10. Box far from
        # the image border so clipping and repair never trigger.
        b = BoundingBox(1000.0, 1000.0, 1100.0, 1100.0)
        rng = np.random.default_rng(123)
        n = 100_000
        deltas = np.empty(n)
        for i in range(n):
            out = jitter_box(b, 10.0, rng, 10_000, 10_000)
            deltas[i] = out.x1 - b.x1
        assert abs(deltas.std() - 10.0) / 10.0 < 0.02
        # Empirical mean within 3 sigma / sqrt(n) of zero.
        assert abs(deltas.mean()) < 3 * 10.0 / np.sqrt(n)

    def test_degenerate_width_keeps_x(self):
        b = BoundingBox(5.0, 10.0, 5.0, 40.0)
        rng = np.random.default_rng(0)
        out = jitter_box(b, 10.0, rng, 100, 100)
        assert out.x1 == b.x1 and out.x2 == b.x2

    def test_same_seed_bit_reproducible(self):
        b = BoundingBox(10, 10, 60, 80)
        outs = []
        for _ in range(2):
            rng = np.random.default_rng(42)
            outs.append([jitter_box(b, 8.0, rng, 128, 128) for _ in range(50)])
        assert outs[0] == outs[1]

    def test_output_clipped_and_valid(self):
        rng = np.random.default_rng(5)
        b = BoundingBox(2, 2, 126, 126)
        for _ in range(500):
            out = jitter_box(b, 2.0, rng, 128, 128)
            assert out.is_valid()
            assert 0 <= out.x1 <= 128 and 0 <= out.x2 <= 128
            assert 0 <= out.y1 <= 128 and 0 <= out.y2 <= 128

    def test_fallback_returns_original_when_unrepairable(self):
        # Zero-width box can never reach 1 px width: sigma_x = 0.
        b = BoundingBox(5.0, 10.0, 5.0, 40.0)
        out = jitter_box(b, 10.0, ZeroRng(), 100, 100)
        assert out == b
