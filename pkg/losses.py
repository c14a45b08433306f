# losses.py

"""
The three training losses and their unweighted sum.

Both BCE terms are summed over classes and averaged over the batch; the
triplet term is averaged over triplets. That keeps all three on a scale
that does not depend on batch size.
"""

from dataclasses import dataclass, field
from typing import Union

import torch

EPS = 1e-7
DIST_EPS = 1e-12

Number = Union[float, torch.Tensor]


@dataclass
class LossBreakdown:
    bce_global: float = 0.0
    triplet: float = 0.0
    bce_region: float = 0.0
    total: float = field(init=False)

    def __post_init__(self):
        self.total = total_loss(self)


def total_loss(parts: LossBreakdown) -> float:
    return parts.bce_global + parts.triplet + parts.bce_region


def combine(bce_global: Number, triplet: Number, bce_region: Number) -> Number:
    """Same sum as total_loss, for tensors that still carry gradients."""
    return bce_global + triplet + bce_region


def bce_multilabel(p: torch.Tensor, y: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """-sum_c [y log p + (1 - y) log(1 - p)], averaged over the batch."""
    if p.shape != y.shape:
        raise ValueError(f"probabilities {tuple(p.shape)} and labels {tuple(y.shape)} differ in shape")
    if p.shape[0] == 0:
        return p.sum() * 0.0
    p = p.clamp(eps, 1.0 - eps)
    y = y.to(p.dtype)
    per_sample = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).sum(dim=1)
    return per_sample.mean()


def embedding_distance(a: torch.Tensor, b: torch.Tensor, squared: bool = False) -> torch.Tensor:
    sq = ((a - b) ** 2).sum(dim=-1)
    if squared:
        return sq
    return torch.sqrt(sq + DIST_EPS)


def triplet_hinge(f_a: torch.Tensor, f_p: torch.Tensor, f_n: torch.Tensor,
                  margin: float = 0.5, squared: bool = False) -> torch.Tensor:
    """[d(a, p) - d(a, n) + m]_+ with Euclidean d; zero subgradient at the kink."""
    if f_a.shape != f_p.shape or f_a.shape != f_n.shape:
        raise ValueError("anchor, positive and negative embeddings must share a shape")
    d_ap = embedding_distance(f_a, f_p, squared)
    d_an = embedding_distance(f_a, f_n, squared)
    return torch.relu(d_ap - d_an + margin)


def triplet_batch(f_a: torch.Tensor, f_p: torch.Tensor, f_n: torch.Tensor,
                  margin: float = 0.5, squared: bool = False) -> torch.Tensor:
    """Mean hinge over a (T, K) batch of triplets; 0 for an empty batch."""
    if f_a.shape[0] == 0:
        return f_a.sum() * 0.0
    return triplet_hinge(f_a, f_p, f_n, margin, squared).mean()


def rv_loss(p_region: torch.Tensor, y: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """
    BCE on region-branch probabilities. No-finding samples have no merged
    map to verify and are left out; a batch of only those gives 0.
    """
    keep = y.sum(dim=1) > 0
    if not bool(keep.any()):
        return p_region.sum() * 0.0
    return bce_multilabel(p_region[keep], y[keep], eps)
