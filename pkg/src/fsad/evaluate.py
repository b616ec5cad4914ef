"""Quantitative evaluation: image/pixel AUROC, the ROAD interpretability
score with noisy linear imputation, retrieval metrics, and report export."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import torch
from scipy.sparse.linalg import factorized
from scipy.special import expit
from scipy.stats import rankdata

from .data import KShotSplit, load_image, load_mask
from .exceptions import ContractError, DomainError, UndefinedMetricError
from .interpret import Heatmap, explain
from .metric import pairwise_cosine_distances

ROAD_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5)


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative,
    ties credited 0.5 (Mann-Whitney formulation)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.size != y.size:
        raise ContractError(f"{s.size} scores but {y.size} labels")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUROC undefined: {n_pos} positives and {n_neg} negatives"
        )
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(heatmaps, masks) -> float:
    """AUROC over all pixels of all images pooled into one ranking.

    ``heatmaps`` may be Heatmap objects or raw arrays (pre-normalization
    values are used); ``masks`` entries may be None for normal images,
    which count as all-negative pixels.
    """
    values, labels = [], []
    for hm, mask in zip(heatmaps, masks, strict=True):
        arr = hm.values if isinstance(hm, Heatmap) else np.asarray(hm)
        if mask is None:
            m = np.zeros(arr.shape, dtype=bool)
        else:
            m = np.asarray(mask).astype(bool)
            if m.shape != arr.shape:
                raise ContractError(
                    f"heatmap shape {arr.shape} != mask shape {m.shape}"
                )
        values.append(arr.reshape(-1))
        labels.append(m.reshape(-1))
    if not values:
        raise UndefinedMetricError("pixel AUROC over an empty set")
    pooled = np.concatenate(values)
    pooled_y = np.concatenate(labels).astype(np.int64)
    if pooled_y.sum() == 0:
        raise UndefinedMetricError("pixel AUROC undefined: no anomalous pixels")
    return auroc(pooled, pooled_y)


def noisy_linear_impute(image, removal_mask, noise_std: float = 0.01, seed: int = 0):
    """Replace masked pixels by the harmonic fill that makes each equal the
    mean of its in-bounds 4-neighbours (known pixels act as boundary data),
    plus zero-mean Gaussian noise of ``noise_std``. Unmasked pixels are
    untouched; an empty mask returns the input unchanged.
    """
    is_torch = isinstance(image, torch.Tensor)
    img = image.detach().cpu().numpy() if is_torch else np.asarray(image)
    single_channel = img.ndim == 2
    chans = img[None] if single_channel else img
    h, w = chans.shape[-2:]
    mask = np.asarray(removal_mask).astype(bool)
    if mask.shape != (h, w):
        raise ContractError(f"mask shape {mask.shape} != image shape {(h, w)}")
    if not mask.any():
        return image.clone() if is_torch else img.copy()
    if mask.all():
        raise DomainError(
            "underdetermined imputation system: every pixel is masked, "
            "no boundary values remain"
        )

    idx_of = np.full((h, w), -1, dtype=np.int64)
    ys, xs = np.nonzero(mask)
    idx_of[ys, xs] = np.arange(len(ys))
    n = len(ys)
    rows, cols, vals = [], [], []
    rhs = np.zeros((n, chans.shape[0]), dtype=np.float64)
    for p, (y, x) in enumerate(zip(ys, xs)):
        neigh = [
            (y + dy, x + dx)
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1))
            if 0 <= y + dy < h and 0 <= x + dx < w
        ]
        rows.append(p)
        cols.append(p)
        vals.append(1.0)
        inv = 1.0 / len(neigh)
        for qy, qx in neigh:
            if mask[qy, qx]:
                rows.append(p)
                cols.append(int(idx_of[qy, qx]))
                vals.append(-inv)
            else:
                rhs[p] += inv * chans[:, qy, qx]
    system = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
    solve = factorized(system)
    rng = np.random.default_rng(seed)
    out = chans.astype(np.float64, copy=True)
    for c in range(chans.shape[0]):
        filled = solve(rhs[:, c])
        if noise_std > 0:
            filled = filled + rng.normal(0.0, noise_std, size=n)
        out[c, ys, xs] = filled
    out = out[0] if single_channel else out
    out = out.astype(img.dtype, copy=False)
    return torch.from_numpy(out.copy()) if is_torch else out


def _confidence(model, image: torch.Tensor) -> float:
    """Softmax-pair confidence of the anomalous class for one image."""
    with torch.no_grad():
        pooled = model(image.unsqueeze(0))
    return float(expit(float(pooled[0, 1]) - float(pooled[0, 0])))


def road_score(
    model,
    items,
    heatmaps,
    fractions=ROAD_FRACTIONS,
    noise_std: float = 0.01,
    seed: int = 0,
) -> float:
    """Mean confidence drop over anomalous items when the top-f fraction of
    pixels ranked by heatmap value (most relevant first) is imputed away."""
    was_training = model.training
    model.eval()
    try:
        drops = []
        n_anomalous = 0
        for i, ((image, label), hm) in enumerate(zip(items, heatmaps, strict=True)):
            if label != 1:
                continue
            n_anomalous += 1
            arr = hm.values if isinstance(hm, Heatmap) else np.asarray(hm)
            h, w = image.shape[-2:]
            if arr.shape != (h, w):
                raise ContractError(
                    f"heatmap shape {arr.shape} != image shape {(h, w)}"
                )
            p_orig = _confidence(model, image)
            order = np.argsort(-arr.reshape(-1), kind="stable")
            for j, frac in enumerate(fractions):
                n_remove = int(round(frac * h * w))
                mask = np.zeros(h * w, dtype=bool)
                mask[order[:n_remove]] = True
                imputed = noisy_linear_impute(
                    image,
                    mask.reshape(h, w),
                    noise_std=noise_std,
                    seed=int(np.random.SeedSequence((seed, i, j)).generate_state(1)[0]),
                )
                imputed = torch.clamp(imputed.float(), 0.0, 1.0)
                drops.append(p_orig - _confidence(model, imputed))
        if n_anomalous == 0:
            raise UndefinedMetricError("ROAD undefined: no anomalous items")
    finally:
        model.train(was_training)
    return float(np.mean(drops))


def recall_at_1(embeddings, labels) -> float:
    """Fraction of points whose nearest neighbour (excluding self) shares
    the label; singleton-class points count as misses."""
    y = np.asarray(labels).reshape(-1)
    if len(y) < 2:
        raise ContractError("recall@1 needs at least two points")
    d = pairwise_cosine_distances(embeddings)
    np.fill_diagonal(d, np.inf)
    hits = 0
    singleton_classes = {
        cls for cls, cnt in zip(*np.unique(y, return_counts=True)) if cnt < 2
    }
    if singleton_classes:
        warnings.warn(
            f"classes with a single member counted as misses: {sorted(singleton_classes)}",
            stacklevel=2,
        )
    for i in range(len(y)):
        if y[i] in singleton_classes:
            continue
        if y[int(d[i].argmin())] == y[i]:
            hits += 1
    return hits / len(y)


def map_at_r(embeddings, labels) -> float:
    """Mean average precision at R, with R the query's class size minus one."""
    y = np.asarray(labels).reshape(-1)
    if len(y) < 2:
        raise ContractError("mAP@R needs at least two points")
    d = pairwise_cosine_distances(embeddings)
    np.fill_diagonal(d, np.inf)
    _, inverse, counts = np.unique(y, return_inverse=True, return_counts=True)
    class_sizes = counts[inverse]
    aps = []
    skipped = 0
    for i in range(len(y)):
        r = int(class_sizes[i]) - 1
        if r == 0:
            skipped += 1
            continue
        order = np.argsort(d[i], kind="stable")[:r]
        rel = (y[order] == y[i]).astype(np.float64)
        precision = np.cumsum(rel) / np.arange(1, r + 1)
        aps.append(float((precision * rel).sum() / r))
    if skipped:
        warnings.warn(f"{skipped} singleton-class queries excluded from mAP@R", stacklevel=2)
    if not aps:
        raise UndefinedMetricError("mAP@R undefined: every class is a singleton")
    return float(np.mean(aps))


def embed_images(model, images: torch.Tensor, chunk: int = 32) -> np.ndarray:
    """Pooled embeddings for a batch of images, in inference mode."""
    was_training = model.training
    model.eval()
    try:
        outs = []
        with torch.no_grad():
            for i in range(0, images.shape[0], chunk):
                outs.append(model.embed(images[i : i + chunk]).cpu().numpy())
    finally:
        model.train(was_training)
    if not outs:
        return np.empty((0, model.head.d_prime))
    return np.concatenate(outs)


def export_embeddings(model, images, labels, paths, out_path: str | Path) -> Path:
    """Write one CSV row per item: path, label, then the embedding entries."""
    emb = embed_images(model, images) if len(paths) else np.empty((0, model.head.d_prime))
    dim = emb.shape[1] if emb.size else model.head.d_prime
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label"] + [f"e{i:03d}" for i in range(dim)])
        for path, label, row in zip(paths, labels, emb):
            writer.writerow([path, int(label)] + [f"{v:.8g}" for v in row])
    return out_path


@dataclass
class EvalReport:
    """All evaluation metrics for one checkpoint on one split."""

    image_auroc: float
    pixel_auroc: float | None
    road: float | None
    recall_at_1: float
    map_at_r: float
    n_images: int
    n_pixels: int
    config: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path


def evaluate_split(
    model,
    split: KShotSplit,
    config,
    heat_source: str = "grad_x_act",
    pixel_source: str = "heatmap",
    fractions=ROAD_FRACTIONS,
    noise_std: float = 0.01,
    seed: int = 0,
) -> EvalReport:
    """Run the full evaluation battery on a split's test items.

    ``pixel_source`` chooses what ranks pixels for localization AUROC:
    the interpretation heatmap (default) or the raw class-1 score map
    upsampled to input resolution.
    """
    if pixel_source not in ("heatmap", "score_map"):
        raise ContractError(f"unknown pixel_source {pixel_source!r}")
    records = list(split.test_items)
    if not records:
        raise ContractError("split has no test items")
    size = config.image_size
    images = torch.stack([load_image(split.root / r.path, size) for r in records])
    labels = np.array([r.label for r in records], dtype=np.int64)

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            pooled = torch.cat(
                [model(images[i : i + 32]) for i in range(0, len(records), 32)]
            )
        s0 = pooled[:, 0].numpy().astype(np.float64)
        s1 = pooled[:, 1].numpy().astype(np.float64)
        image_auroc = auroc(s1 - s0, labels)

        top_h = min(config.top_h, model.head.d_prime)
        heatmaps = [
            explain(model, images[i], top_h=top_h, sigma=config.sigma,
                    heat_source=heat_source)
            for i in range(len(records))
        ]
        if pixel_source == "score_map":
            pixel_values = [_upsampled_score_map(model, images[i]) for i in range(len(records))]
        else:
            pixel_values = heatmaps

        pix_maps, pix_masks = [], []
        for rec, hm in zip(records, pixel_values):
            if rec.label == 0:
                pix_maps.append(hm)
                pix_masks.append(None)
            elif rec.mask:
                pix_maps.append(hm)
                pix_masks.append(load_mask(split.root / rec.mask, size).numpy())
            else:
                warnings.warn(
                    f"skipping {rec.path} in pixel AUROC: no ground-truth mask",
                    stacklevel=2,
                )
        has_masks = any(m is not None for m in pix_masks)
        px_auroc = pixel_auroc(pix_maps, pix_masks) if has_masks else None
        n_pixels = sum(
            (np.prod(m.shape) if m is not None else size * size) for m in pix_masks
        ) if has_masks else 0

        anomalous_present = bool((labels == 1).any())
        road = (
            road_score(
                model,
                list(zip(images, labels)),
                heatmaps,
                fractions=fractions,
                noise_std=noise_std,
                seed=seed,
            )
            if anomalous_present
            else None
        )

        emb = embed_images(model, images)
        r1 = recall_at_1(emb, labels)
        mapr = map_at_r(emb, labels)
    finally:
        model.train(was_training)

    return EvalReport(
        image_auroc=image_auroc,
        pixel_auroc=px_auroc,
        road=road,
        recall_at_1=r1,
        map_at_r=mapr,
        n_images=len(records),
        n_pixels=int(n_pixels),
        config=config.to_dict(),
    )


def _upsampled_score_map(model, image: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        _, maps = model.score_stacks(model.stacks(image.unsqueeze(0)))
    up = torch.nn.functional.interpolate(
        maps[:, 1:2].double(),
        size=(image.shape[-2], image.shape[-1]),
        mode="bilinear",
        align_corners=False,
    )
    return up[0, 0].numpy()
