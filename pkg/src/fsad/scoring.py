"""Trainable anomaly-scoring head: channel reweighting, linear embedding,
depth reduction to spatial score maps, and global max pooling.

For each class c in {0 normal, 1 anomalous} the head carries a channel-mix
matrix W_u[c] (D' x D') and bias b[c] (D'); a depth-reduction vector w_out
(D') and scalar bias b_out are shared across classes. Per spatial position:

    p        = softmax(row_norms(W_u[c]) / temperature)   over channels
    a        = z * p                                       (broadcast spatially)
    e        = W_u[c] a + b[c]
    s        = w_out . e + b_out                           (scalar per position)
    score[c] = max over positions of s

An image is classified anomalous iff score[1] > score[0] (ties -> normal).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .exceptions import ContractError, DomainError, NumericError


@dataclass(frozen=True)
class ScorePair:
    """Pooled class scores with their score maps and argmax positions."""

    s0: float
    s1: float
    map0: np.ndarray
    map1: np.ndarray
    argmax0: tuple[int, int]
    argmax1: tuple[int, int]

    @property
    def label(self) -> int:
        return 1 if self.s1 > self.s0 else 0


class ScoringHead(nn.Module):
    """Two-class scoring head over reduced feature stacks.

    ``norm_target`` selects what enters the softmax of the channel weights:
    "row" (default) uses per-row Frobenius norms of W_u[c], "column" the
    per-column norms, "matrix" the full-matrix norm replicated per channel
    (which makes the weights uniform). ``class_conditioning`` "per_class"
    gives each class its own mix matrix; "shared" uses one matrix with
    class-specific biases only.
    """

    def __init__(
        self,
        d_prime: int,
        temperature: float = 1.0,
        norm_target: str = "row",
        class_conditioning: str = "per_class",
        init_scale: float = 0.05,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if temperature <= 0:
            raise DomainError(f"temperature must be > 0, got {temperature}")
        if norm_target not in ("row", "column", "matrix"):
            raise ContractError(f"unknown norm_target {norm_target!r}")
        if class_conditioning not in ("per_class", "shared"):
            raise ContractError(f"unknown class_conditioning {class_conditioning!r}")
        self.d_prime = d_prime
        self.temperature = temperature
        self.norm_target = norm_target
        self.class_conditioning = class_conditioning

        n_mix = 1 if class_conditioning == "shared" else 2
        w_mix = torch.empty(n_mix, d_prime, d_prime)
        w_out = torch.empty(d_prime)
        nn.init.normal_(w_mix, std=init_scale, generator=generator)
        nn.init.normal_(w_out, std=init_scale, generator=generator)
        self.w_mix = nn.Parameter(w_mix)
        self.b_mix = nn.Parameter(torch.zeros(2, d_prime))
        self.w_out = nn.Parameter(w_out)
        self.b_out = nn.Parameter(torch.zeros(()))

    def mix_matrix(self, c: int) -> torch.Tensor:
        return self.w_mix[0 if self.class_conditioning == "shared" else c]

    def channel_weights(self, c: int, temperature: float | None = None) -> torch.Tensor:
        """Softmax distribution over the D' channels for class ``c``."""
        t = self.temperature if temperature is None else temperature
        if t <= 0:
            raise DomainError(f"temperature must be > 0, got {t}")
        w = self.mix_matrix(c)
        if self.norm_target == "row":
            norms = torch.linalg.norm(w, dim=1)
        elif self.norm_target == "column":
            norms = torch.linalg.norm(w, dim=0)
        else:
            norms = torch.linalg.norm(w).expand(self.d_prime)
        return torch.softmax(norms / t, dim=0)


def _check_depth(z: torch.Tensor, head: ScoringHead) -> torch.Tensor:
    single = z.ndim == 3
    if single:
        z = z.unsqueeze(0)
    if z.ndim != 4 or z.shape[1] != head.d_prime:
        raise ContractError(
            f"expected stacks of depth {head.d_prime}, got shape {tuple(z.shape)}"
        )
    return z


def channel_reweight(z: torch.Tensor, head: ScoringHead, c: int) -> torch.Tensor:
    """Scale each channel of z by the class-c softmax channel weight."""
    single = z.ndim == 3
    zb = _check_depth(z, head)
    p = head.channel_weights(c).to(zb.dtype)
    a = zb * p.view(1, -1, 1, 1)
    return a.squeeze(0) if single else a


def score_map(a: torch.Tensor, head: ScoringHead, c: int) -> torch.Tensor:
    """Per-position linear embedding then depth reduction to a scalar map."""
    single = a.ndim == 3
    ab = _check_depth(a, head)
    w = head.mix_matrix(c).to(ab.dtype)
    b = head.b_mix[c].to(ab.dtype)
    e = torch.einsum("ij,njhw->nihw", w, ab) + b.view(1, -1, 1, 1)
    s = torch.einsum("i,nihw->nhw", head.w_out.to(ab.dtype), e) + head.b_out.to(ab.dtype)
    return s.squeeze(0) if single else s


def score_stacks(z: torch.Tensor, head: ScoringHead) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched scoring: returns pooled scores (N, 2) and score maps (N, 2, h, w)."""
    zb = _check_depth(z, head)
    maps = torch.stack(
        [score_map(channel_reweight(zb, head, c), head, c) for c in (0, 1)], dim=1
    )
    pooled = maps.amax(dim=(-2, -1))
    if not torch.isfinite(pooled).all():
        _name_nonfinite(zb, head)
    return pooled, maps


def score_image(z: torch.Tensor, head: ScoringHead) -> ScorePair:
    """Score a single reduced feature stack (D', h, w)."""
    if z.ndim != 3:
        raise ContractError(f"score_image expects a single stack, got {tuple(z.shape)}")
    pooled, maps = score_stacks(z.unsqueeze(0), head)
    m0 = maps[0, 0].detach().cpu().numpy()
    m1 = maps[0, 1].detach().cpu().numpy()
    return ScorePair(
        s0=float(pooled[0, 0]),
        s1=float(pooled[0, 1]),
        map0=m0,
        map1=m1,
        argmax0=tuple(np.unravel_index(int(m0.argmax()), m0.shape)),
        argmax1=tuple(np.unravel_index(int(m1.argmax()), m1.shape)),
    )


def _name_nonfinite(z: torch.Tensor, head: ScoringHead) -> None:
    if not torch.isfinite(z).all():
        raise NumericError("non-finite anomaly score: reduced feature stack (theta_r output)")
    for name in ("w_mix", "b_mix"):
        if not torch.isfinite(getattr(head, name)).all():
            raise NumericError(f"non-finite anomaly score: class-mix parameters theta_u ({name})")
    for name in ("w_out", "b_out"):
        if not torch.isfinite(getattr(head, name)).all():
            raise NumericError(f"non-finite anomaly score: depth-reduction parameters theta_s ({name})")
    raise NumericError("non-finite anomaly score")
