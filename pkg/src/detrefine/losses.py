"""Training objectives over normalized embeddings and class-weight rows:
scaled-cosine cross-entropy, a background-suppression hinge and an
inter-class separation hinge, plus their unit-weight sum.

Hinge convention: terms are plain sums (a `normalization="mean"` switch
divides by batch size), and the subgradient at an exactly-satisfied margin
uses the inactive branch, i.e. it is zero at the kink.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F


@dataclass
class LabeledBatch:
    """Embeddings, labels and the normalized class-weight rows they score
    against. Label K (== number of foreground classes) is background; the
    base/novel split tag of a sample follows from its label."""

    embeddings: torch.Tensor  # (B, d), unit or zero rows
    labels: torch.Tensor  # (B,) int64 in [0, K]
    class_weights: torch.Tensor  # (K+1, d), unit rows
    novel_class_ids: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise ValueError("embeddings must be (B, d)")
        if self.labels.ndim != 1 or len(self.labels) != len(self.embeddings):
            raise ValueError("labels must be (B,) matching embeddings")
        if self.class_weights.ndim != 2 or self.class_weights.shape[1] != self.embeddings.shape[1]:
            raise ValueError("class_weights must be (K+1, d) matching embeddings")
        k = self.background_index
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() > k):
            raise ValueError(f"labels must lie in [0, {k}]")
        bad = [c for c in self.novel_class_ids if not 0 <= c < k]
        if bad:
            raise ValueError(f"novel class ids {bad} out of range")

    @property
    def background_index(self) -> int:
        return self.class_weights.shape[0] - 1

    def similarities(self) -> torch.Tensor:
        return self.embeddings @ self.class_weights.T  # (B, K+1)


def _reduce(terms: torch.Tensor, batch_size: int, normalization: str) -> torch.Tensor:
    total = terms.sum()
    if normalization == "sum":
        return total
    if normalization == "mean":
        return total / max(batch_size, 1)
    raise ValueError(f"unknown normalization {normalization!r}")


def loss_cls(batch: LabeledBatch, logit_scale: float) -> torch.Tensor:
    """Mean softmax cross-entropy over scaled cosine logits."""
    if len(batch.labels) == 0:
        raise ValueError("classification loss is undefined on an empty batch")
    logits = logit_scale * batch.similarities()
    return F.cross_entropy(logits, batch.labels)


def loss_bg(
    batch: LabeledBatch,
    margin: float,
    *,
    literal_indexing: bool = False,
    normalization: str = "sum",
) -> torch.Tensor:
    """Background-suppression hinge.

    Each sample's own template (ground-truth class for foreground samples,
    background for background samples) must beat the confusable template
    (background, respectively the most-responsive foreground class) by
    `margin`. `literal_indexing=True` swaps the positive/negative roles in
    both sums, for comparison experiments; the default follows the
    semantics above.
    """
    if margin <= 0:
        raise ValueError("margin must be > 0")
    if len(batch.labels) == 0:
        return batch.embeddings.new_zeros(())
    sims = batch.similarities()
    k = batch.background_index
    fg_mask = batch.labels < k
    bg_mask = ~fg_mask
    terms = []
    if fg_mask.any():
        own = sims[fg_mask, batch.labels[fg_mask]]
        bg_sim = sims[fg_mask, k]
        pos, neg = (bg_sim, own) if literal_indexing else (own, bg_sim)
        terms.append(torch.relu(margin - pos + neg))
    if bg_mask.any():
        bg_sim = sims[bg_mask, k]
        best_fg = sims[bg_mask, :k].max(dim=1).values
        pos, neg = (best_fg, bg_sim) if literal_indexing else (bg_sim, best_fg)
        terms.append(torch.relu(margin - pos + neg))
    return _reduce(torch.cat(terms), len(batch.labels), normalization)


def loss_sp(
    batch: LabeledBatch,
    margin: float,
    *,
    normalization: str = "sum",
) -> torch.Tensor:
    """Inter-class separation hinge over foreground samples only.

    A base-class sample's own-class similarity must beat its
    most-responsive novel class by `margin`, and symmetrically for
    novel-class samples. Zero when either class pool is empty.
    """
    if margin <= 0:
        raise ValueError("margin must be > 0")
    k = batch.background_index
    novel_cols = sorted(batch.novel_class_ids)
    base_cols = sorted(set(range(k)) - batch.novel_class_ids)
    if not novel_cols or not base_cols or len(batch.labels) == 0:
        return batch.embeddings.new_zeros(())
    sims = batch.similarities()
    novel_idx = torch.as_tensor(novel_cols, device=sims.device)
    base_idx = torch.as_tensor(base_cols, device=sims.device)
    is_novel = torch.isin(batch.labels, novel_idx)
    fg_mask = batch.labels < k
    terms = []
    base_samples = fg_mask & ~is_novel
    if base_samples.any():
        own = sims[base_samples, batch.labels[base_samples]]
        competitor = sims[base_samples][:, novel_idx].max(dim=1).values
        terms.append(torch.relu(margin - own + competitor))
    novel_samples = fg_mask & is_novel
    if novel_samples.any():
        own = sims[novel_samples, batch.labels[novel_samples]]
        competitor = sims[novel_samples][:, base_idx].max(dim=1).values
        terms.append(torch.relu(margin - own + competitor))
    if not terms:
        return batch.embeddings.new_zeros(())
    return _reduce(torch.cat(terms), len(batch.labels), normalization)


def loss_total(
    batch: LabeledBatch,
    logit_scale: float,
    margin_bg: float,
    margin_sp: float,
    *,
    normalization: str = "sum",
) -> torch.Tensor:
    """Unit-weight sum of the three objectives."""
    return (
        loss_cls(batch, logit_scale)
        + loss_bg(batch, margin_bg, normalization=normalization)
        + loss_sp(batch, margin_sp, normalization=normalization)
    )
