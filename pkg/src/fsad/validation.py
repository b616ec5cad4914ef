"""Input validation helpers for arrays of images, labels and masks."""

from __future__ import annotations

import numpy as np
import torch

from .exceptions import ContractError


def as_image_batch(X) -> torch.Tensor:
    """Coerce input images to a float32 tensor of shape (N, 3, H, W).

    Accepts a torch tensor or numpy array shaped (N, 3, H, W), (N, H, W, 3),
    or a single image (3, H, W) / (H, W, 3). Values are expected in [0, 1].
    """
    if isinstance(X, torch.Tensor):
        arr = X.detach().cpu().float()
    else:
        arr = torch.as_tensor(np.asarray(X), dtype=torch.float32)
    if arr.ndim == 3:
        arr = arr.unsqueeze(0)
    if arr.ndim != 4:
        raise ContractError(f"expected a batch of images, got ndim={arr.ndim}")
    if arr.shape[1] != 3 and arr.shape[-1] == 3:
        arr = arr.permute(0, 3, 1, 2).contiguous()
    if arr.shape[1] != 3:
        raise ContractError(
            f"expected 3-channel images, got shape {tuple(arr.shape)}"
        )
    if not torch.isfinite(arr).all():
        raise ContractError("image batch contains non-finite values")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise ContractError(
            f"image values must lie in [0, 1], got range [{lo:.4g}, {hi:.4g}]"
        )
    return arr


def as_label_array(y, n: int | None = None) -> np.ndarray:
    """Coerce labels to an int array of 0/1 values, optionally checking length."""
    labels = np.asarray(y).reshape(-1).astype(np.int64)
    if labels.size and not np.isin(labels, (0, 1)).all():
        bad = sorted(set(labels.tolist()) - {0, 1})
        raise ContractError(f"labels must be 0 or 1, got values {bad}")
    if n is not None and labels.size != n:
        raise ContractError(f"expected {n} labels, got {labels.size}")
    return labels


def as_mask(m, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Coerce a binary mask to a bool array of shape (H, W)."""
    if isinstance(m, torch.Tensor):
        m = m.detach().cpu().numpy()
    mask = np.asarray(m)
    if mask.ndim != 2:
        raise ContractError(f"mask must be 2-D, got ndim={mask.ndim}")
    uniq = np.unique(mask)
    if not np.isin(uniq, (0, 1)).all():
        raise ContractError(f"mask must be binary, got values {uniq[:8]}")
    if shape is not None and mask.shape != tuple(shape):
        raise ContractError(f"mask shape {mask.shape} != expected {tuple(shape)}")
    return mask.astype(bool)


def check_feature_stack(z, depth: int | None = None) -> torch.Tensor:
    """Validate a feature stack shaped (D, h, w) or (N, D, h, w)."""
    if not isinstance(z, torch.Tensor):
        z = torch.as_tensor(np.asarray(z), dtype=torch.float32)
    if z.ndim not in (3, 4):
        raise ContractError(f"feature stack must be 3-D or 4-D, got ndim={z.ndim}")
    d = z.shape[-3]
    if depth is not None and d != depth:
        raise ContractError(f"feature stack depth {d} != expected {depth}")
    return z
