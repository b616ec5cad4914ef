"""Cosine embedding distance, informative pair sampling, and the margin loss.

Embeddings are global-average-pooled reduced feature stacks. Negative pairs
are drawn with probability proportional to the inverse density of pairwise
distances on the unit hypersphere, which favours informative (hard-ish)
negatives over the abundant easy ones.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import ContractError, DomainError

# Distances entering the sampling density are clipped below at this value
# to keep the inverse-density weights bounded.
SAMPLING_DISTANCE_CUTOFF = 0.5


def pool_embedding(stack: torch.Tensor) -> torch.Tensor:
    """Global average pool a feature stack (..., D', h, w) to (..., D')."""
    if stack.ndim < 3:
        raise ContractError(f"expected a feature stack, got shape {tuple(stack.shape)}")
    return stack.mean(dim=(-2, -1))


def cosine_distance(a, b) -> float:
    """d = 1 - cos(a, b), in [0, 2]. Undefined for zero-norm vectors."""
    a = torch.as_tensor(a, dtype=torch.float64).reshape(-1)
    b = torch.as_tensor(b, dtype=torch.float64).reshape(-1)
    if a.shape != b.shape:
        raise ContractError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = float(torch.linalg.norm(a)), float(torch.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine distance is undefined for zero-norm vectors")
    return 1.0 - float(a @ b) / (na * nb)


def pairwise_cosine_distances(embeddings) -> np.ndarray:
    """Full (N, N) cosine-distance matrix for rows of ``embeddings``."""
    emb = np.asarray(
        embeddings.detach().cpu().numpy()
        if isinstance(embeddings, torch.Tensor)
        else embeddings,
        dtype=np.float64,
    )
    norms = np.linalg.norm(emb, axis=1)
    if (norms == 0).any():
        raise DomainError("cosine distance is undefined for zero-norm vectors")
    unit = emb / norms[:, None]
    d = 1.0 - unit @ unit.T
    np.fill_diagonal(d, 0.0)
    return d


@dataclass(frozen=True)
class PairBatch:
    """Anchor/other index pairs with positive (same-label) flags."""

    anchors: np.ndarray
    others: np.ndarray
    positive: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if not (len(self.anchors) == len(self.others) == len(self.positive)):
            raise ContractError("pair arrays must have equal length")
        if (self.anchors == self.others).any():
            raise ContractError("self-pairs are not allowed")
        same = self.labels[self.anchors] == self.labels[self.others]
        if (same != self.positive).any():
            raise ContractError("positive flags inconsistent with labels")

    def __len__(self) -> int:
        return len(self.anchors)


def sample_pairs_distance_weighted(
    embeddings, labels, per_anchor: int = 1, seed: int = 0
) -> PairBatch:
    """For each anchor: one uniform positive and ``per_anchor`` negatives
    sampled with probability proportional to the inverse hypersphere
    distance density. Deterministic given ``seed``.
    """
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    d_cos = pairwise_cosine_distances(embeddings)
    n = len(labels)
    if n != d_cos.shape[0]:
        raise ContractError("labels and embeddings disagree in length")
    if len(np.unique(labels)) < 2:
        raise DomainError("no negative pairs: batch contains a single class")

    dim = int(embeddings.shape[-1])
    # chord distance between unit vectors; density q(d) ~ d^(E-2) (1-d^2/4)^((E-3)/2)
    chord = np.sqrt(np.clip(2.0 * d_cos, 0.0, 4.0))
    chord = np.clip(chord, SAMPLING_DISTANCE_CUTOFF, 2.0 - 1e-6)
    log_q = (dim - 2) * np.log(chord) + ((dim - 3) / 2.0) * np.log(
        1.0 - 0.25 * chord**2
    )

    rng = np.random.default_rng(seed)
    anchors, others, positive = [], [], []
    for i in range(n):
        same = np.flatnonzero(labels == labels[i])
        same = same[same != i]
        if len(same) == 0:
            warnings.warn(
                f"anchor {i} skipped: its class has a single member", stacklevel=2
            )
            continue
        diff = np.flatnonzero(labels != labels[i])
        anchors.append(i)
        others.append(int(rng.choice(same)))
        positive.append(True)
        log_w = -log_q[i, diff]
        w = np.exp(log_w - log_w.max())
        w /= w.sum()
        for j in rng.choice(diff, size=per_anchor, replace=True, p=w):
            anchors.append(i)
            others.append(int(j))
            positive.append(False)
    return PairBatch(
        anchors=np.asarray(anchors, dtype=np.int64),
        others=np.asarray(others, dtype=np.int64),
        positive=np.asarray(positive, dtype=bool),
        labels=labels,
    )


def pair_distances(embeddings: torch.Tensor, pairs: PairBatch) -> torch.Tensor:
    """Differentiable cosine distances for each pair in the batch."""
    unit = torch.nn.functional.normalize(embeddings, dim=1, eps=1e-12)
    a = unit[torch.from_numpy(pairs.anchors)]
    b = unit[torch.from_numpy(pairs.others)]
    return 1.0 - (a * b).sum(dim=1)


def margin_loss(pairs: PairBatch, distances, mu: float, beta: float):
    """Adaptive margin loss: mean over pairs of max(0, mu + s (d - beta)),
    with s = +1 for positive and -1 for negative pairs.

    Zero exactly when positive pairs sit below beta - mu and negative pairs
    above beta + mu. Empty pair lists yield 0 with a warning.
    """
    if mu <= 0 or beta <= 0:
        raise DomainError(f"mu and beta must be positive, got mu={mu}, beta={beta}")
    d = (
        distances
        if isinstance(distances, torch.Tensor)
        else torch.as_tensor(distances, dtype=torch.float64)
    )
    if len(pairs) != d.numel():
        raise ContractError(f"{len(pairs)} pairs but {d.numel()} distances")
    if len(pairs) == 0:
        warnings.warn("margin loss over no pairs defined as 0", stacklevel=2)
        return torch.zeros((), dtype=d.dtype)
    sign = torch.from_numpy(np.where(pairs.positive, 1.0, -1.0)).to(d.dtype)
    return torch.relu(mu + sign * (d.reshape(-1) - beta)).mean()
