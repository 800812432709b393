"""Correction-network trunk: a small convolutional feature extractor with a
compact non-local attention block, plus the checkpoint container.

The attention block flattens the whole feature map (channels and positions)
to one vector of length M = C*H*W, forms the dot-product pairwise response
Y = (theta phi^T) g over all M entries and adds a learned residual
projection. The production path exploits associativity, theta * (phi . g),
for O(M) cost; `attention_reference` materializes the M x M similarity
matrix and must agree numerically.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn

from detrefine.head import CosineHead

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class FeatureExtractorConfig:
    """Shape of the trunk: stride-2 conv stages (group-normalized), the
    attention insertion point (1-based, after that stage), and the output
    embedding dimension. `norm_groups=0` disables normalization."""

    input_size: int = 64
    channels: tuple[int, ...] = (16, 32, 64, 128)
    embed_dim: int = 128
    attention_stage: int = 3
    norm_groups: int = 8

    def __post_init__(self):
        if self.input_size < 2 ** len(self.channels):
            raise ValueError(
                f"input size {self.input_size} too small for "
                f"{len(self.channels)} stride-2 stages"
            )
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if not self.channels:
            raise ValueError("need at least one conv stage")
        if not 1 <= self.attention_stage <= len(self.channels):
            raise ValueError(
                f"attention_stage must be in [1, {len(self.channels)}], "
                f"got {self.attention_stage}"
            )
        if self.norm_groups < 0:
            raise ValueError("norm_groups must be >= 0")
        if self.norm_groups:
            bad = [c for c in self.channels if c % self.norm_groups]
            if bad:
                raise ValueError(
                    f"channels {bad} not divisible by norm_groups={self.norm_groups}"
                )


class CompactNonLocal(nn.Module):
    """Single-head dot-product attention over every channel-and-position
    entry of the feature map, with a zero-initialized residual projection
    so the block starts as the identity."""

    def __init__(self, channels: int):
        super().__init__()
        self.theta = nn.Conv2d(channels, channels, 1, bias=False)
        self.phi = nn.Conv2d(channels, channels, 1, bias=False)
        self.g = nn.Conv2d(channels, channels, 1, bias=False)
        self.out = nn.Conv2d(channels, channels, 1, bias=False)
        nn.init.zeros_(self.out.weight)

    def _projections(self, x: torch.Tensor):
        if x.ndim != 4:
            raise ValueError(f"expected a (B, C, H, W) map, got shape {tuple(x.shape)}")
        b = x.shape[0]
        t = self.theta(x).reshape(b, -1)
        p = self.phi(x).reshape(b, -1)
        g = self.g(x).reshape(b, -1)
        return t, p, g

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t, p, g = self._projections(x)
        # (theta phi^T) g == theta * (phi . g): the pairwise response reduces
        # to a per-sample scalar because theta, phi, g are single vectors.
        y = t * (p * g).sum(dim=1, keepdim=True)
        return self.out(y.view_as(x)) + x

    def attention_reference(self, x: torch.Tensor) -> torch.Tensor:
        """O(M^2) path: materialize the M x M pairwise similarity matrix."""
        t, p, g = self._projections(x)
        ys = [torch.outer(tb, pb) @ gb for tb, pb, gb in zip(t, p, g)]
        y = torch.stack(ys, dim=0)
        return self.out(y.view_as(x)) + x


class FeatureExtractor(nn.Module):
    """Stride-2 conv stages with ReLU, attention after the configured
    stage, global average pooling and a linear map to the embedding."""

    def __init__(self, config: FeatureExtractorConfig):
        super().__init__()
        self.config = config
        stages = []
        in_ch = 3
        for out_ch in config.channels:
            layers = [nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)]
            if config.norm_groups:
                layers.append(nn.GroupNorm(config.norm_groups, out_ch))
            layers.append(nn.ReLU())
            stages.append(nn.Sequential(*layers))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.attention = CompactNonLocal(config.channels[config.attention_stage - 1])
        self.proj = nn.Linear(config.channels[-1], config.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ValueError(
                f"expected crops of shape (B, 3, {s}, {s}), got {tuple(x.shape)}"
            )
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if i == self.config.attention_stage:
                x = self.attention(x)
        x = x.mean(dim=(2, 3))
        return self.proj(x)


def extract_features(model: nn.Module, crops: torch.Tensor) -> torch.Tensor:
    """Deterministic inference-mode embeddings for a crop batch."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(crops)
    finally:
        model.train(was_training)


class CorrectionModel(nn.Module):
    """The trainable artifact: feature extractor plus cosine head."""

    def __init__(
        self,
        extractor_config: FeatureExtractorConfig,
        class_names: list[str],
        logit_scale: float = 16.0,
        trainable_scale: bool = False,
    ):
        super().__init__()
        self.extractor_config = extractor_config
        self.class_names = list(class_names)
        self.extractor = FeatureExtractor(extractor_config)
        self.head = CosineHead(
            n_foreground_classes=len(class_names),
            embed_dim=extractor_config.embed_dim,
            logit_scale=logit_scale,
            trainable_scale=trainable_scale,
        )

    def embed(self, crops: torch.Tensor) -> torch.Tensor:
        from detrefine.head import normalize_rows

        return normalize_rows(self.extractor(crops))

    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(crops))

    def probabilities(self, crops: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(crops), dim=-1)

    def with_head(self, head: CosineHead) -> "CorrectionModel":
        import copy

        clone = copy.deepcopy(self)
        clone.head = head
        return clone


def save_checkpoint(
    model: CorrectionModel,
    path,
    *,
    base_class_ids=(),
    novel_class_ids=(),
    extra: dict | None = None,
) -> None:
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "extractor_config": asdict(model.extractor_config),
        "class_names": model.class_names,
        "logit_scale": float(model.head.logit_scale),
        "trainable_scale": isinstance(model.head.logit_scale, nn.Parameter),
        "base_class_ids": sorted(int(c) for c in base_class_ids),
        "novel_class_ids": sorted(int(c) for c in novel_class_ids),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[CorrectionModel, dict]:
    """Rebuild a CorrectionModel from a checkpoint file.

    Returns (model, metadata) where metadata carries the class split and
    any extra fields stored at save time.
    """
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(
            f"unsupported checkpoint schema {version!r}; "
            f"expected {CHECKPOINT_SCHEMA_VERSION}"
        )
    config = FeatureExtractorConfig(
        input_size=payload["extractor_config"]["input_size"],
        channels=tuple(payload["extractor_config"]["channels"]),
        embed_dim=payload["extractor_config"]["embed_dim"],
        attention_stage=payload["extractor_config"]["attention_stage"],
    )
    model = CorrectionModel(
        config,
        payload["class_names"],
        logit_scale=payload["logit_scale"],
        trainable_scale=payload["trainable_scale"],
    )
    model.load_state_dict(payload["state_dict"])
    meta = {
        "base_class_ids": payload["base_class_ids"],
        "novel_class_ids": payload["novel_class_ids"],
        "extra": payload["extra"],
    }
    return model, meta
