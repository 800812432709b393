"""Cosine-similarity classification head with weight imprinting.

Logits are a scaled cosine between the L2-normalized embedding and
L2-normalized per-class weight rows; row K (the last) is background. The
head stores raw rows and normalizes on every forward pass so fine-tuning
stays well-defined; imprinting writes already-normalized rows. There is no
bias term.
"""

from __future__ import annotations

import copy
import logging
from typing import Mapping

import torch
from torch import nn

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


class DegenerateEmbeddingError(ValueError):
    """Pooled embeddings cancelled out; no direction left to imprint."""


def normalize_embedding(f: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """f / ||f||2 plus a degeneracy flag.

    Vectors with norm below 1e-12 come back as zero vectors with the flag
    set instead of raising.
    """
    norm = torch.linalg.vector_norm(f)
    if norm < NORM_EPS:
        return torch.zeros_like(f), True
    return f / norm, False


def normalize_rows(x: torch.Tensor) -> torch.Tensor:
    """Row-wise L2 normalization; near-zero rows stay zero."""
    norms = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    return x / norms.clamp_min(NORM_EPS)


class CosineHead(nn.Module):
    """(K+1) x d weight matrix over K foreground classes plus background."""

    def __init__(
        self,
        n_foreground_classes: int,
        embed_dim: int,
        logit_scale: float = 16.0,
        trainable_scale: bool = False,
    ):
        super().__init__()
        if n_foreground_classes < 1:
            raise ValueError("need at least one foreground class")
        if embed_dim < 2:
            raise ValueError("embedding dimension must be >= 2")
        if logit_scale <= 0:
            raise ValueError("logit_scale must be > 0")
        self.n_foreground_classes = n_foreground_classes
        self.embed_dim = embed_dim
        self.weight = nn.Parameter(
            0.02 * torch.randn(n_foreground_classes + 1, embed_dim)
        )
        scale = torch.tensor(float(logit_scale))
        if trainable_scale:
            self.logit_scale = nn.Parameter(scale)
        else:
            self.register_buffer("logit_scale", scale)

    @property
    def background_index(self) -> int:
        return self.n_foreground_classes

    def normalized_weight(self) -> torch.Tensor:
        return normalize_rows(self.weight)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.embed_dim:
            raise ValueError(
                f"embeddings have dim {z.shape[-1]}, head expects {self.embed_dim}"
            )
        return self.logit_scale * (z @ self.normalized_weight().T)


def cosine_logits(z: torch.Tensor, head: CosineHead) -> torch.Tensor:
    """Scaled cosine logits for unit-norm (or zero) embedding rows."""
    return head(z)


def _imprint_row(embeddings: torch.Tensor, what: str) -> torch.Tensor:
    z = normalize_rows(embeddings.to(torch.get_default_dtype()))
    mean = z.mean(dim=0)
    row, degenerate = normalize_embedding(mean)
    if degenerate:
        raise DegenerateEmbeddingError(
            f"{what}: embeddings cancel out; supply different examples"
        )
    return row


def imprint_novel_weights(
    head: CosineHead, shots: Mapping[int, torch.Tensor]
) -> CosineHead:
    """New head whose rows for the given classes are the normalized mean of
    the shot embeddings; every other row is untouched.

    `shots` maps a foreground class id to an (n, d) tensor (one embedding
    per shot). Embeddings are normalized before averaging.
    """
    new_head = copy.deepcopy(head)
    with torch.no_grad():
        for class_id, embeddings in shots.items():
            if not 0 <= class_id < head.n_foreground_classes:
                raise ValueError(f"class {class_id} is not a foreground class")
            if embeddings.ndim != 2 or embeddings.shape[0] < 1:
                raise ValueError(f"class {class_id}: need an (n, d) embedding stack")
            new_head.weight[class_id] = _imprint_row(embeddings, f"class {class_id}")
    return new_head


def infer_background_weight(
    head: CosineHead,
    base_embeddings: torch.Tensor,
    novel_embeddings: torch.Tensor,
) -> CosineHead:
    """New head whose background row is the normalized mean of background
    proposal embeddings pooled from base-split and novel-split images.

    A pool drawn from a single side is accepted but logged, since the
    background class is shared between both splits.
    """
    n_base = 0 if base_embeddings is None else len(base_embeddings)
    n_novel = 0 if novel_embeddings is None else len(novel_embeddings)
    if n_base + n_novel == 0:
        raise ValueError("background pool is empty")
    if n_base == 0 or n_novel == 0:
        log.warning(
            "background pool drawn from a single split (base=%d, novel=%d)",
            n_base,
            n_novel,
        )
    else:
        log.info("background pool ratio base:novel = %d:%d", n_base, n_novel)
    parts = [e for e in (base_embeddings, novel_embeddings) if e is not None and len(e)]
    pooled = torch.cat(parts, dim=0)
    new_head = copy.deepcopy(head)
    with torch.no_grad():
        new_head.weight[head.background_index] = _imprint_row(pooled, "background")
    return new_head
