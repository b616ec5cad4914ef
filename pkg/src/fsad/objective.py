"""Entropy-based scoring loss and the joint training objective.

The scoring loss drives the anomaly-branch score up for anomalous samples
and down for normal ones:

    mean over batch of  (1 - y) * s  -  y * log(1 - exp(-s))

It expects non-negative scores; raw pooled scores are rectified with a
softplus first (``rectify_scores``), and the log argument is floored at
1e-12 so the loss stays finite and differentiable everywhere.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import ContractError, NumericError

LOG_FLOOR = 1e-12


def rectify_scores(raw: torch.Tensor) -> torch.Tensor:
    """Smooth non-negative reparameterization of raw anomaly scores."""
    return torch.nn.functional.softplus(raw)


def entropy_loss(scores, labels):
    """Mean of (1-y) s - y log(1 - e^(-s)) over the batch.

    ``scores`` are the (rectified, non-negative) anomaly-branch scores.
    Returns a torch scalar when given tensors, so gradients flow.
    """
    s = (
        scores
        if isinstance(scores, torch.Tensor)
        else torch.as_tensor(np.asarray(scores, dtype=np.float64))
    )
    y = torch.as_tensor(np.asarray(labels, dtype=np.float64)).to(s.dtype)
    if s.numel() != y.numel():
        raise ContractError(f"{s.numel()} scores but {y.numel()} labels")
    if s.numel() == 0:
        warnings.warn("entropy loss over an empty batch defined as 0", stacklevel=2)
        return torch.zeros((), dtype=s.dtype)
    if not torch.isfinite(s).all():
        raise NumericError("entropy loss received non-finite scores")
    s = s.reshape(-1)
    y = y.reshape(-1)
    # 1 - e^(-s) computed as -expm1(-s) for small-s accuracy
    log_term = torch.log(torch.clamp(-torch.expm1(-s), min=LOG_FLOOR))
    return ((1.0 - y) * s - y * log_term).mean()


def total_loss(l_entr, l_margin, margin_weight: float):
    """Joint objective: l_entr + margin_weight * l_margin."""
    if margin_weight < 0:
        raise ContractError(f"margin weight must be >= 0, got {margin_weight}")
    return l_entr + margin_weight * l_margin


@dataclass(frozen=True)
class LossReport:
    """One training or validation loss measurement."""

    entropy: float
    margin: float
    margin_weight: float
    total: float
    n_items: int

    @classmethod
    def compute(
        cls, entropy: float, margin: float, margin_weight: float, n_items: int
    ) -> "LossReport":
        return cls(
            entropy=float(entropy),
            margin=float(margin),
            margin_weight=float(margin_weight),
            total=float(total_loss(entropy, margin, margin_weight)),
            n_items=int(n_items),
        )
