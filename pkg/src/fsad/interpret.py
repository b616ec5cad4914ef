"""Interpretation heatmaps from per-channel score gradients.

The pipeline: backpropagate the pooled class-1 score to the reduced feature
stack to get one gradient map per channel, rank channels by the Shannon
entropy of their normalized absolute maps, sum the top H, Gaussian-blur at
feature resolution (reflective borders), bilinearly upsample to the input
resolution, and min-shift / max-scale for export. Metrics consume the
pre-normalization values, whose ranking the affine normalization preserves.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from .exceptions import ContractError, NumericError

ENTROPY_FLOOR = 1e-12


@dataclass(frozen=True)
class GradientMapSet:
    """Per-channel gradients of the pooled class score, shape (D', h, w)."""

    maps: np.ndarray
    target: int


@dataclass(frozen=True)
class Heatmap:
    """Input-resolution relevance raster plus its generation metadata.

    ``values`` holds the pre-normalization raster; ``normalized()`` returns
    the exported non-negative version with max 1 (unless identically 0).
    """

    values: np.ndarray
    top_h: int
    sigma: float
    target: int
    s0: float
    s1: float

    @property
    def low_score(self) -> bool:
        return self.s1 <= self.s0

    def normalized(self) -> np.ndarray:
        shifted = self.values - self.values.min()
        peak = shifted.max()
        return shifted / peak if peak > 0 else shifted


def stack_gradients(score_fn, z: torch.Tensor, target: int) -> GradientMapSet:
    """Gradient of the target-class pooled score w.r.t. every position of
    every channel of ``z``; the other class receives zero gradient.

    ``score_fn(z)`` must return the pooled scores (s0, s1) as tensors.
    """
    if target not in (0, 1):
        raise ContractError(f"target class must be 0 or 1, got {target}")
    z = z.detach().clone().requires_grad_(True)
    s0, s1 = score_fn(z)
    picked = s1 if target == 1 else s0
    (grad,) = torch.autograd.grad(picked, z)
    if not torch.isfinite(grad).all():
        raise NumericError("non-finite gradients in interpretation backward pass")
    return GradientMapSet(maps=grad.detach().cpu().numpy(), target=target)


def gradient_maps(model, image: torch.Tensor, target: int = 1) -> GradientMapSet:
    """Per-channel gradient maps of the pooled class score for one image."""
    if image.ndim != 3:
        raise ContractError(f"expected a single image (3, H, W), got {tuple(image.shape)}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            z = model.stacks(image.unsqueeze(0))

        def score_fn(zz):
            pooled, _ = model.score_stacks(zz)
            return pooled[0, 0], pooled[0, 1]

        grads = stack_gradients(score_fn, z, target)
    finally:
        model.train(was_training)
    return GradientMapSet(maps=grads.maps[0], target=target)


def map_entropy(m: np.ndarray) -> float:
    """Shannon entropy of a map's normalized absolute values, in [0, ln(w*h)].

    An all-zero map has no distribution to speak of; its entropy is 0.
    """
    m = np.asarray(m, dtype=np.float64)
    mass = np.abs(m)
    denom = mass.sum()
    if denom <= 0:
        warnings.warn("entropy of an all-zero map defined as 0", stacklevel=2)
        return 0.0
    p = mass / denom
    return max(0.0, float(-(p * np.log(p + ENTROPY_FLOOR)).sum()))


def rank_channels(maps: np.ndarray) -> np.ndarray:
    """Channel indices sorted by descending entropy, ties by lower index."""
    entropies = np.array([map_entropy(maps[i]) for i in range(maps.shape[0])])
    return np.lexsort((np.arange(len(entropies)), -entropies))


def build_heatmap(
    grads: GradientMapSet,
    top_h: int,
    sigma: float,
    out_size: int | tuple[int, int],
    s0: float = 0.0,
    s1: float = 0.0,
) -> Heatmap:
    """Sum the H highest-entropy maps, blur, and upsample to ``out_size``."""
    maps = np.asarray(grads.maps, dtype=np.float64)
    d_prime = maps.shape[0]
    if not 1 <= top_h <= d_prime:
        raise ContractError(f"top_h must be in [1, {d_prime}], got {top_h}")
    selected = rank_channels(maps)[:top_h]
    combined = maps[selected].sum(axis=0)
    if sigma > 0:
        combined = gaussian_filter(combined, sigma=sigma, mode="reflect")
    if isinstance(out_size, int):
        out_size = (out_size, out_size)
    up = torch.nn.functional.interpolate(
        torch.from_numpy(combined)[None, None],
        size=out_size,
        mode="bilinear",
        align_corners=False,
    )[0, 0].numpy()
    return Heatmap(
        values=up.astype(np.float32),
        top_h=top_h,
        sigma=float(sigma),
        target=grads.target,
        s0=float(s0),
        s1=float(s1),
    )


def explain(
    model,
    image: torch.Tensor,
    top_h: int | None = None,
    sigma: float | None = None,
    heat_source: str = "grad_x_act",
) -> Heatmap:
    """Heatmap for one image, target class fixed to 1 (anomalous).

    ``heat_source`` selects the per-channel maps that are ranked and summed.
    "grad_x_act" (default) multiplies the score gradients by the feature
    activations, tying each channel's contribution to the image content that
    drives the score; "gradient" uses the raw gradients, whose aggregate
    sign is not anchored by the input and can invert between trained models.
    """
    if heat_source not in ("gradient", "grad_x_act"):
        raise ContractError(f"unknown heat_source {heat_source!r}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            z = model.stacks(image.unsqueeze(0))
            pooled, _ = model.score_stacks(z)

        def score_fn(zz):
            p, _ = model.score_stacks(zz)
            return p[0, 0], p[0, 1]

        grads = stack_gradients(score_fn, z, target=1)
    finally:
        model.train(was_training)
    maps = grads.maps[0]
    if heat_source == "grad_x_act":
        maps = maps * z[0].detach().cpu().numpy()
    s0, s1 = float(pooled[0, 0]), float(pooled[0, 1])
    d_prime = maps.shape[0]
    h = min(top_h if top_h is not None else 8, d_prime)
    hm = build_heatmap(
        GradientMapSet(maps=maps, target=1),
        top_h=h,
        sigma=4.0 if sigma is None else sigma,
        out_size=(image.shape[-2], image.shape[-1]),
        s0=s0,
        s1=s1,
    )
    if hm.low_score:
        warnings.warn(
            "class-1 score does not exceed class-0 score: heatmap flagged low-score",
            stacklevel=2,
        )
    return hm


def save_heatmap(hm: Heatmap, stem: str | Path, png: bool = True) -> list[Path]:
    """Write ``<stem>.heat.bin`` (row-major little-endian float32),
    ``<stem>.heat.json`` metadata, and optionally an 8-bit grayscale PNG."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    bin_path = stem.with_name(stem.name + ".heat.bin")
    json_path = stem.with_name(stem.name + ".heat.json")
    bin_path.write_bytes(hm.values.astype("<f4").tobytes())
    meta = {
        "height": int(hm.values.shape[0]),
        "width": int(hm.values.shape[1]),
        "top_h": hm.top_h,
        "sigma": hm.sigma,
        "s0": hm.s0,
        "s1": hm.s1,
        "target": hm.target,
        "low_score": hm.low_score,
    }
    json_path.write_text(json.dumps(meta, indent=2) + "\n")
    written = [bin_path, json_path]
    if png:
        png_path = stem.with_name(stem.name + ".heat.png")
        gray = (hm.normalized() * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(gray, mode="L").save(png_path)
        written.append(png_path)
    return written
