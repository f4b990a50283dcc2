"""Masked-jigsaw fusion of pooled context and target descriptors.

A fusion plan shuffles the m target descriptors of a group into a random slot
order (the jigsaw) and zeroes a fixed-size subset of slots (the mask). The
fused vector is the context descriptor concatenated with the m rearranged
slots, giving dimension (m + 1) * C. The context slot is never masked, and
masked slots are exact zeros so no gradient leaks through them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class FusionPlan:
    """One sampled rearrangement: slot j receives target ``permutation[j]``."""

    m: int
    permutation: tuple
    mask_set: frozenset
    mask_ratio: float
    seed: int | None = None

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if sorted(self.permutation) != list(range(self.m)):
            raise ValueError(f"permutation {self.permutation} is not a permutation of range({self.m})")
        if not set(self.mask_set) <= set(range(self.m)):
            raise ValueError(f"mask_set {sorted(self.mask_set)} contains slots outside range({self.m})")
        expected = math.floor(self.m * self.mask_ratio)
        if len(self.mask_set) != expected:
            raise ValueError(
                f"mask_set has {len(self.mask_set)} slots; ratio {self.mask_ratio} over m={self.m} "
                f"requires exactly {expected}"
            )

    @property
    def num_masked(self) -> int:
        return len(self.mask_set)


def sample_fusion_plan(
    m: int,
    mask_ratio: float,
    rng: np.random.Generator,
    *,
    shuffle: bool = True,
    mask: bool = True,
    seed: int | None = None,
) -> FusionPlan:
    """Draw a plan: permutation first, then the masked slot subset.

    ``shuffle=False`` pins the identity permutation (mask-only variant);
    ``mask=False`` records an effective ratio of 0 and an empty mask set
    (jigsaw-only variant).
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError(f"mask_ratio must lie in [0, 1), got {mask_ratio}")
    permutation = tuple(int(i) for i in rng.permutation(m)) if shuffle else tuple(range(m))
    effective_ratio = mask_ratio if mask else 0.0
    n_masked = math.floor(m * effective_ratio)
    masked = frozenset(int(i) for i in rng.choice(m, size=n_masked, replace=False)) if n_masked else frozenset()
    return FusionPlan(m=m, permutation=permutation, mask_set=masked, mask_ratio=effective_ratio, seed=seed)


def _check_dims(context_vec: torch.Tensor, target_vecs: torch.Tensor, plan: FusionPlan) -> None:
    if target_vecs.shape[-2] != plan.m:
        raise ValueError(
            f"plan expects m={plan.m} targets, got {target_vecs.shape[-2]} descriptor rows"
        )
    if context_vec.shape[-1] != target_vecs.shape[-1]:
        raise ValueError(
            f"context dim {context_vec.shape[-1]} != target dim {target_vecs.shape[-1]}"
        )
    if context_vec.shape[:-1] != target_vecs.shape[:-2]:
        raise ValueError(
            f"batch shapes differ: context {tuple(context_vec.shape[:-1])} "
            f"vs targets {tuple(target_vecs.shape[:-2])}"
        )


def fuse(context_vec: torch.Tensor, target_vecs: torch.Tensor, plan: FusionPlan) -> torch.Tensor:
    """Apply one plan. context (..., C) + targets (..., m, C) -> (..., (m+1)*C)."""
    _check_dims(context_vec, target_vecs, plan)
    index = torch.as_tensor(plan.permutation, dtype=torch.long, device=target_vecs.device)
    gathered = target_vecs.index_select(-2, index)
    if plan.mask_set:
        keep = torch.ones(plan.m, dtype=target_vecs.dtype, device=target_vecs.device)
        keep[sorted(plan.mask_set)] = 0.0
        gathered = gathered * keep.unsqueeze(-1)
    return torch.cat([context_vec, gathered.flatten(-2)], dim=-1)


def fuse_batch(context_vecs: torch.Tensor, target_vecs: torch.Tensor, plans) -> torch.Tensor:
    """Vectorized fusion with one plan per batch row.

    context (B, C) + targets (B, m, C) + B plans -> (B, (m+1)*C).
    """
    if context_vecs.ndim != 2 or target_vecs.ndim != 3:
        raise ValueError("fuse_batch expects context (B, C) and targets (B, m, C)")
    batch = context_vecs.shape[0]
    if len(plans) != batch:
        raise ValueError(f"got {len(plans)} plans for a batch of {batch}")
    _check_dims(context_vecs, target_vecs, plans[0])
    m = plans[0].m
    channels = target_vecs.shape[-1]
    perm = torch.tensor([p.permutation for p in plans], dtype=torch.long, device=target_vecs.device)
    gathered = torch.gather(target_vecs, 1, perm.unsqueeze(-1).expand(batch, m, channels))
    keep = torch.ones((batch, m), dtype=target_vecs.dtype, device=target_vecs.device)
    for row, plan in enumerate(plans):
        if plan.m != m:
            raise ValueError("all plans in a batch must share m")
        if plan.mask_set:
            keep[row, sorted(plan.mask_set)] = 0.0
    gathered = gathered * keep.unsqueeze(-1)
    return torch.cat([context_vecs, gathered.flatten(1)], dim=1)
