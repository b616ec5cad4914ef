"""Synthetic defect dataset generator for desk-scale experiments.

Normals are smooth correlated-noise textures; anomalies are the same
textures with 1-3 inserted high-contrast blobs or scratches and exact
ground-truth masks, written in the standard inspection layout.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .data import DatasetIndex, scan_dataset

# Blob contrast is at least 3x the texture's standard deviation so a tiny
# model can separate the classes within minutes.
TEXTURE_STD = 0.06
MIN_CONTRAST = 0.28


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """One smooth RGB background texture with values away from [0,1] edges."""
    base = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 10.0)
    base = (base - base.mean()) / (base.std() + 1e-9) * TEXTURE_STD
    tint = rng.uniform(0.40, 0.60, size=3)
    img = base[..., None] + tint[None, None, :]
    img += rng.normal(0.0, 0.008, size=img.shape)
    return np.clip(img, 0.05, 0.95)


def _blob_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    """Support of one elliptical blob covering roughly 0.5-3% of the image."""
    area_frac = rng.uniform(0.005, 0.03)
    r_mean = np.sqrt(area_frac * size * size / np.pi)
    ra = r_mean * rng.uniform(0.7, 1.4)
    rb = max(1.5, area_frac * size * size / (np.pi * ra))
    theta = rng.uniform(0, np.pi)
    margin = int(np.ceil(max(ra, rb))) + 2
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / ra) ** 2 + (v / rb) ** 2 <= 1.0


def _scratch_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    """Support of one thin scratch: a thickened random line segment."""
    length = rng.uniform(0.3, 0.6) * size
    theta = rng.uniform(0, np.pi)
    cy = rng.uniform(0.2 * size, 0.8 * size)
    cx = rng.uniform(0.2 * size, 0.8 * size)
    half = 0.5 * length
    thickness = rng.uniform(1.0, 2.0)
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    along = dx * np.cos(theta) + dy * np.sin(theta)
    across = -dx * np.sin(theta) + dy * np.cos(theta)
    return (np.abs(along) <= half) & (np.abs(across) <= thickness)


def _insert_defects(
    rng: np.random.Generator, img: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    size = img.shape[0]
    mask = np.zeros((size, size), dtype=bool)
    n_defects = int(rng.integers(1, 4))
    out = img.copy()
    for _ in range(n_defects):
        support = (
            _scratch_mask(rng, size)
            if rng.random() < 0.3
            else _blob_mask(rng, size)
        )
        if not support.any():
            continue
        local_mean = out[support].mean()
        contrast = max(MIN_CONTRAST, 3.2 * TEXTURE_STD) * rng.uniform(1.0, 1.4)
        sign = -1.0 if local_mean > 0.5 else 1.0
        color_jitter = rng.uniform(-0.05, 0.05, size=3)
        out[support] = np.clip(
            local_mean + sign * contrast + color_jitter[None, :], 0.0, 1.0
        )
        mask |= support
    return out, mask


def _save_png(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def generate_synthetic(
    out: str | Path,
    n_normal: int,
    n_anomalous: int,
    size: int,
    seed: int,
    category: str = "synthetic",
) -> DatasetIndex:
    """Write a seed-deterministic synthetic dataset and return its index.

    ``n_normal`` training normals go to ``train/good``; an extra
    ``n_normal // 5`` normals are generated for ``test/good`` so evaluation
    has both classes. Anomalous images and their exact masks go to
    ``test/defect`` and ``ground_truth/defect``.
    """
    if n_normal < 0 or n_anomalous < 0 or size < 8:
        raise ValueError("need n_normal >= 0, n_anomalous >= 0, size >= 8")
    out = Path(out)
    cat_dir = out / category
    try:
        cat_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {cat_dir}: {e}") from e

    rng = np.random.default_rng(seed)
    n_test_normal = n_normal // 5

    for i in range(n_normal):
        _save_png(_texture(rng, size), cat_dir / "train" / "good" / f"{i:04d}.png")
    for i in range(n_test_normal):
        _save_png(_texture(rng, size), cat_dir / "test" / "good" / f"{i:04d}.png")

    # test/ must exist even when there are no anomalies and no test normals
    (cat_dir / "test").mkdir(parents=True, exist_ok=True)
    (cat_dir / "train" / "good").mkdir(parents=True, exist_ok=True)

    for i in range(n_anomalous):
        img, mask = _insert_defects(rng, _texture(rng, size))
        _save_png(img, cat_dir / "test" / "defect" / f"{i:04d}.png")
        _save_png(
            mask.astype(np.float64),
            cat_dir / "ground_truth" / "defect" / f"{i:04d}_mask.png",
        )

    return scan_dataset(out, category)
