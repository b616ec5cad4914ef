"""Feature extraction backbones and the trainable channel-reduction block.

Backbones are frozen; only the reduction block (and the scoring head built
on top of it) trains. Two kinds are provided: an adapter around ImageNet
VGG-11 convolutional features (weights loaded from a user-supplied path,
never downloaded), and a small random CNN for tests and desk-scale runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .exceptions import ContractError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class BackboneSpec:
    """Declared geometry of a backbone: output depth and spatial downsampling."""

    kind: str
    depth: int
    downsample: int
    reduction_hidden: int
    weights_path: str | None = None


BACKBONE_SPECS = {
    "vgg11": BackboneSpec(kind="vgg11", depth=512, downsample=32, reduction_hidden=256),
    "tiny": BackboneSpec(kind="tiny", depth=64, downsample=8, reduction_hidden=64),
}


def get_backbone_spec(kind: str, weights_path: str | None = None) -> BackboneSpec:
    if kind not in BACKBONE_SPECS:
        raise ContractError(
            f"unknown backbone kind {kind!r}; expected one of {sorted(BACKBONE_SPECS)}"
        )
    spec = BACKBONE_SPECS[kind]
    if weights_path:
        spec = BackboneSpec(
            kind=spec.kind,
            depth=spec.depth,
            downsample=spec.downsample,
            reduction_hidden=spec.reduction_hidden,
            weights_path=weights_path,
        )
    return spec


class TinyBackbone(nn.Module):
    """Three stride-2 convolutions (3 -> 16 -> 32 -> 64) with ReLU.

    Weights are random but fully determined by ``seed``, so runs and
    checkpoints are reproducible without external files.
    """

    def __init__(self, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.layers = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )
        for m in self.layers:
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(
                    m.weight, mode="fan_in", nonlinearity="relu", generator=gen
                )
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class VGG11Features(nn.Module):
    """ImageNet VGG-11 convolutional features with built-in normalization.

    ``weights_path`` must point to a torch state dict (full-model or
    features-only keys); nothing is downloaded.
    """

    def __init__(self, weights_path: str | Path | None = None):
        super().__init__()
        from torchvision.models import vgg11

        self.features = vgg11(weights=None).features
        if weights_path:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            feat_state = {
                k.removeprefix("features."): v
                for k, v in state.items()
                if k.startswith("features.")
            } or state
            self.features.load_state_dict(feat_state)
        mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
        self.register_buffer("input_mean", mean)
        self.register_buffer("input_std", std)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features((x - self.input_mean) / self.input_std)


def make_backbone(spec: BackboneSpec, seed: int = 0) -> nn.Module:
    """Build a frozen backbone in inference mode."""
    if spec.kind == "tiny":
        net: nn.Module = TinyBackbone(seed=seed)
    elif spec.kind == "vgg11":
        net = VGG11Features(weights_path=spec.weights_path)
    else:
        raise ContractError(f"unknown backbone kind {spec.kind!r}")
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def extract_features(
    images: torch.Tensor, backbone: nn.Module, spec: BackboneSpec | None = None
) -> torch.Tensor:
    """Run a frozen backbone and check the output against the declared spec."""
    single = images.ndim == 3
    if single:
        images = images.unsqueeze(0)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ContractError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
    with torch.no_grad():
        feats = backbone(images)
    if spec is not None:
        n, _, h, w = images.shape
        expected = (n, spec.depth, h // spec.downsample, w // spec.downsample)
        if tuple(feats.shape) != expected:
            raise ContractError(
                f"backbone output shape {tuple(feats.shape)} != expected {expected}"
            )
    return feats.squeeze(0) if single else feats


class ReductionBlock(nn.Module):
    """Reduce a D-deep feature stack to D' maps while keeping w x h.

    Four 3x3 convolutions with ReLU, each followed by batch normalization,
    then a final 1x1 convolution down to ``d_prime`` channels. Padding
    preserves the spatial size everywhere.
    """

    def __init__(
        self,
        in_depth: int,
        d_prime: int,
        hidden: int = 256,
        batch_norm: bool = True,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.in_depth = in_depth
        self.d_prime = d_prime
        widths = [in_depth] + [hidden] * 4
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, padding=1) for i in range(4)
        )
        self.norms = nn.ModuleList(
            nn.BatchNorm2d(hidden, eps=1e-5, momentum=0.1)
            if batch_norm
            else nn.Identity()
            for _ in range(4)
        )
        self.project = nn.Conv2d(hidden, d_prime, 1)
        for conv in list(self.convs) + [self.project]:
            nn.init.kaiming_normal_(
                conv.weight, mode="fan_in", nonlinearity="relu", generator=generator
            )
            nn.init.zeros_(conv.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out, _ = self.forward_intermediates(x)
        return out

    def forward_intermediates(
        self, x: torch.Tensor
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Forward pass that also returns each post-ReLU activation map."""
        single = x.ndim == 3
        if single:
            x = x.unsqueeze(0)
        if x.shape[1] != self.in_depth:
            raise ContractError(
                f"reduction expects depth {self.in_depth}, got {x.shape[1]}"
            )
        post_relu = []
        h = x
        for conv, norm in zip(self.convs, self.norms):
            h = torch.relu(conv(h))
            post_relu.append(h)
            h = norm(h)
        out = self.project(h)
        return (out.squeeze(0) if single else out), post_relu


def reduce_features(stack: torch.Tensor, block: ReductionBlock) -> torch.Tensor:
    """Apply the reduction block; depth D -> D', spatial size unchanged."""
    return block(stack)
