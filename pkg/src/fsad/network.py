"""Full detection network: frozen backbone -> reduction block -> scoring head."""

from __future__ import annotations

import torch
from torch import nn

from .backbone import (
    BackboneSpec,
    ReductionBlock,
    extract_features,
    get_backbone_spec,
    make_backbone,
)
from .metric import pool_embedding
from .scoring import ScoringHead, score_stacks


class DetectionModel(nn.Module):
    """End-to-end anomaly scorer. Only the reduction block and the scoring
    head are trainable; the backbone stays frozen and in inference mode."""

    def __init__(
        self,
        backbone: nn.Module,
        spec: BackboneSpec,
        reduction: ReductionBlock,
        head: ScoringHead,
    ):
        super().__init__()
        self.backbone = backbone
        self.spec = spec
        self.reduction = reduction
        self.head = head
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.backbone.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()  # frozen: never in training mode
        return self

    def trainable_parameters(self):
        yield from self.reduction.parameters()
        yield from self.head.parameters()

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return extract_features(images, self.backbone, self.spec)

    def reduce(self, feats: torch.Tensor) -> torch.Tensor:
        return self.reduction(feats)

    def stacks(self, images: torch.Tensor) -> torch.Tensor:
        return self.reduce(self.features(images))

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """Pooled embeddings used by the metric objective, shape (N, D')."""
        return pool_embedding(self.stacks(images))

    def score_stacks(self, z: torch.Tensor):
        return score_stacks(z, self.head)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Pooled class scores, shape (N, 2): columns (s0, s1)."""
        pooled, _ = self.score_stacks(self.stacks(images))
        return pooled


def build_model(
    backbone_kind: str = "tiny",
    d_prime: int = 128,
    temperature: float = 1.0,
    seed: int = 0,
    backbone_weights: str | None = None,
    batch_norm: bool = True,
    norm_target: str = "row",
    class_conditioning: str = "per_class",
    dtype: torch.dtype = torch.float32,
) -> DetectionModel:
    """Construct a model with fully seed-determined initialization."""
    spec = get_backbone_spec(backbone_kind, backbone_weights or None)
    backbone = make_backbone(spec, seed=seed)
    gen = torch.Generator().manual_seed(seed + 1)
    reduction = ReductionBlock(
        in_depth=spec.depth,
        d_prime=d_prime,
        hidden=spec.reduction_hidden,
        batch_norm=batch_norm,
        generator=gen,
    )
    head = ScoringHead(
        d_prime=d_prime,
        temperature=temperature,
        norm_target=norm_target,
        class_conditioning=class_conditioning,
        generator=gen,
    )
    model = DetectionModel(backbone, spec, reduction, head)
    if dtype is not torch.float32:
        model = model.to(dtype)
    return model
