import math

import numpy as np
import pytest
import torch

from detrefine.head import (
    CosineHead,
    DegenerateEmbeddingError,
    cosine_logits,
    imprint_novel_weights,
    infer_background_weight,
    normalize_embedding,
    normalize_rows,
)
from oracles import central_difference_gradient, relative_gradient_error


class TestNormalizeEmbedding:
    def test_analytic_case(self):
        out, flag = normalize_embedding(torch.tensor([3.0, 4.0]))
        assert not flag
        assert torch.allclose(out, torch.tensor([0.6, 0.8]))

    def test_unit_vector_unchanged(self):
        v = torch.tensor([0.0, 1.0, 0.0])
        out, flag = normalize_embedding(v)
        assert not flag
        assert torch.equal(out, v)

    def test_zero_vector_flagged(self):
        out, flag = normalize_embedding(torch.zeros(4))
        assert flag
        assert torch.equal(out, torch.zeros(4))

    def test_tiny_vector_flagged(self):
        out, flag = normalize_embedding(torch.full((3,), 1e-14))
        assert flag

    def test_normalize_rows_batch(self):
        x = torch.tensor([[3.0, 4.0], [0.0, 0.0], [0.0, 2.0]])
        out = normalize_rows(x)
        assert torch.allclose(out[0], torch.tensor([0.6, 0.8]))
        assert torch.equal(out[1], torch.zeros(2))
        assert torch.allclose(out[2], torch.tensor([0.0, 1.0]))


class TestCosineLogits:
    def test_aligned_row_gives_scale(self):
        head = CosineHead(2, 4, logit_scale=16.0)
        with torch.no_grad():
            head.weight[1] = torch.tensor([2.0, 0.0, 0.0, 0.0])  # normalizes to e0
        z = torch.tensor([[1.0, 0.0, 0.0, 0.0]])
        logits = cosine_logits(z, head)
        assert logits[0, 1].item() == pytest.approx(16.0, abs=1e-6)

    def test_orthogonal_gives_zero(self):
        head = CosineHead(1, 3, logit_scale=10.0)
        with torch.no_grad():
            head.weight[0] = torch.tensor([1.0, 0.0, 0.0])
        z = torch.tensor([[0.0, 1.0, 0.0]])
        assert cosine_logits(z, head)[0, 0].item() == pytest.approx(0.0, abs=1e-7)

    def test_two_dim_analytic(self):
        head = CosineHead(1, 2, logit_scale=10.0)
        with torch.no_grad():
            head.weight[0] = torch.tensor([1.0, 1.0])
        z = torch.tensor([[1.0, 0.0]])
        assert cosine_logits(z, head)[0, 0].item() == pytest.approx(
            10.0 / math.sqrt(2), abs=1e-6
        )

    def test_all_logits_bounded_by_scale(self):
        torch.manual_seed(0)
        head = CosineHead(5, 16, logit_scale=12.0)
        z = normalize_rows(torch.randn(40, 16))
        logits = cosine_logits(z, head)
        assert logits.abs().max().item() <= 12.0 + 1e-5

    def test_dimension_mismatch_rejected(self):
        head = CosineHead(2, 8)
        with pytest.raises(ValueError):
            cosine_logits(torch.zeros(3, 5), head)

    def test_softmax_invariant_to_embedding_rescale(self):
        torch.manual_seed(1)
        head = CosineHead(3, 6)
        raw = torch.randn(4, 6)
        p1 = torch.softmax(cosine_logits(normalize_rows(raw), head), dim=-1)
        p2 = torch.softmax(cosine_logits(normalize_rows(7.3 * raw), head), dim=-1)
        assert torch.allclose(p1, p2, atol=1e-6)
        assert torch.equal(p1.argmax(dim=-1), p2.argmax(dim=-1))

    def test_gradient_wrt_weights_matches_finite_differences(self):
        torch.manual_seed(3)
        d, k = 5, 3
        z = normalize_rows(torch.randn(4, d, dtype=torch.float64))
        readout = torch.randn(4, k + 1, dtype=torch.float64)
        w0 = torch.randn(k + 1, d, dtype=torch.float64)

        def scalar(w_np):
            head = CosineHead(k, d, logit_scale=10.0).double()
            with torch.no_grad():
                head.weight.copy_(torch.as_tensor(w_np))
                return float((cosine_logits(z, head) * readout).sum())

        head = CosineHead(k, d, logit_scale=10.0).double()
        with torch.no_grad():
            head.weight.copy_(w0)
        loss = (cosine_logits(z, head) * readout).sum()
        loss.backward()
        numeric = central_difference_gradient(scalar, w0.numpy().copy())
        assert relative_gradient_error(head.weight.grad.numpy(), numeric) < 1e-4


class TestImprinting:
    def make_head(self, k=3, d=4):
        torch.manual_seed(7)
        return CosineHead(k, d)

    def test_single_shot_copies_embedding(self):
        head = self.make_head()
        shot = normalize_rows(torch.tensor([[1.0, 2.0, 2.0, 0.0]]))
        new = imprint_novel_weights(head, {1: shot})
        assert torch.allclose(new.weight[1], shot[0], atol=1e-7)

    def test_antipodal_shots_degenerate(self):
        head = self.make_head()
        z = torch.tensor([[1.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0]])
        with pytest.raises(DegenerateEmbeddingError, match="class 2"):
            imprint_novel_weights(head, {2: z})

    def test_two_orthogonal_shots(self):
        head = self.make_head(k=2, d=2)
        z = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        new = imprint_novel_weights(head, {0: z})
        expected = torch.tensor([1.0, 1.0]) / math.sqrt(2)
        assert torch.allclose(new.weight[0], expected, atol=1e-7)

    def test_other_rows_untouched_and_input_not_mutated(self):
        head = self.make_head()
        before = head.weight.detach().clone()
        new = imprint_novel_weights(head, {0: torch.tensor([[1.0, 0, 0, 0]])})
        assert torch.equal(head.weight, before)
        assert torch.equal(new.weight[1:], before[1:])

    def test_imprinted_rows_unit_norm(self):
        torch.manual_seed(11)
        head = self.make_head(k=4, d=8)
        shots = {c: torch.randn(5, 8) for c in range(4)}
        new = imprint_novel_weights(head, shots)
        norms = torch.linalg.vector_norm(new.weight[:4], dim=1)
        assert torch.allclose(norms, torch.ones(4), atol=1e-6)

    def test_unnormalized_shots_are_normalized_first(self):
        head = self.make_head(k=2, d=2)
        # Same directions as the orthogonal test, different magnitudes.
        z = torch.tensor([[10.0, 0.0], [0.0, 0.1]])
        new = imprint_novel_weights(head, {0: z})
        expected = torch.tensor([1.0, 1.0]) / math.sqrt(2)
        assert torch.allclose(new.weight[0], expected, atol=1e-6)

    def test_background_row_not_imprintable_as_class(self):
        head = self.make_head(k=2)
        with pytest.raises(ValueError):
            imprint_novel_weights(head, {2: torch.ones(1, 4)})


class TestBackgroundInference:
    def test_single_embedding_pool(self):
        head = CosineHead(2, 3)
        z = normalize_rows(torch.tensor([[0.0, 3.0, 4.0]]))
        new = infer_background_weight(head, z, torch.zeros(0, 3))
        assert torch.allclose(new.weight[2], z[0], atol=1e-7)

    def test_single_split_pool_logged(self, caplog):
        import logging

        head = CosineHead(2, 3)
        z = torch.tensor([[1.0, 0.0, 0.0]])
        with caplog.at_level(logging.WARNING, logger="detrefine.head"):
            infer_background_weight(head, z, torch.zeros(0, 3))
        assert any("single split" in rec.message for rec in caplog.records)

    def test_balanced_pool_is_weighted_mean(self):
        torch.manual_seed(5)
        head = CosineHead(2, 6)
        base = normalize_rows(torch.randn(8, 6))
        novel = normalize_rows(torch.randn(8, 6))
        new = infer_background_weight(head, base, novel)
        mean = torch.cat([base, novel]).mean(dim=0)
        expected = mean / torch.linalg.vector_norm(mean)
        assert torch.allclose(new.weight[2], expected, atol=1e-6)
        # Equal-sized halves: pooled mean equals the mean of the two means.
        half_mix = (base.mean(0) + novel.mean(0)) / 2
        assert torch.allclose(mean, half_mix, atol=1e-6)

    def test_empty_pool_rejected(self):
        head = CosineHead(2, 3)
        with pytest.raises(ValueError):
            infer_background_weight(head, torch.zeros(0, 3), torch.zeros(0, 3))
