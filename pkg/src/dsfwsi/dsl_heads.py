"""Projector/predictor bank and the dense per-stage similarity losses.

Every (stream, stage) pair owns its own projector and predictor, where the
streams are the context branch, the target branch, and the fused masked-jigsaw
descriptors. With all four stages and all three streams active that is 12
projectors and 12 predictors. Losses are symmetric negative cosine with a
stop-gradient on the projected side, summed over stages with fixed weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import STAGE_WIDTHS

EPS = 1e-12

STREAMS = ("context", "target", "fusion")

# Loss-log column name per stream.
STREAM_COLUMNS = {"context": "L_c", "target": "L_t", "fusion": "L_fu"}


def neg_cosine(p: torch.Tensor, z: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Negative cosine similarity, stop-gradient on ``z``.

    Accepts vectors (D,) or batches (..., D); batches are averaged. Norms are
    epsilon-guarded inside the square root so all-zero inputs (masked fusion
    slots can produce them) yield a finite value instead of NaN.
    """
    if p.shape != z.shape:
        raise ValueError(f"shape mismatch: p {tuple(p.shape)} vs z {tuple(z.shape)}")
    z = z.detach()
    p = p / torch.sqrt((p * p).sum(dim=-1, keepdim=True) + eps)
    z = z / torch.sqrt((z * z).sum(dim=-1, keepdim=True) + eps)
    return -(p * z).sum(dim=-1).mean()


def stage_loss(p1: torch.Tensor, z2: torch.Tensor, p2: torch.Tensor, z1: torch.Tensor) -> torch.Tensor:
    """Symmetric two-view loss for one (stream, stage) pair."""
    return 0.5 * neg_cosine(p1, z2) + 0.5 * neg_cosine(p2, z1)


def dsl_branch_loss(stage_losses, weights) -> torch.Tensor:
    """Weighted sum of per-stage losses for one stream."""
    stage_losses = list(stage_losses)
    weights = list(weights)
    if len(stage_losses) != len(weights):
        raise ValueError(f"{len(stage_losses)} stage losses but {len(weights)} weights")
    total = None
    for weight, loss in zip(weights, stage_losses):
        term = weight * loss
        total = term if total is None else total + term
    return total


def make_projector(dim: int) -> nn.Sequential:
    """3-layer MLP, hidden = output = input width, BN throughout, no final ReLU."""
    return nn.Sequential(
        nn.Linear(dim, dim, bias=False),
        nn.BatchNorm1d(dim),
        nn.ReLU(inplace=True),
        nn.Linear(dim, dim, bias=False),
        nn.BatchNorm1d(dim),
        nn.ReLU(inplace=True),
        nn.Linear(dim, dim, bias=False),
        nn.BatchNorm1d(dim, affine=False),
    )


def make_predictor(dim: int) -> nn.Sequential:
    """2-layer bottleneck MLP, hidden = a quarter of the input width."""
    hidden = dim // 4
    return nn.Sequential(
        nn.Linear(dim, hidden, bias=False),
        nn.BatchNorm1d(hidden),
        nn.ReLU(inplace=True),
        nn.Linear(hidden, dim),
    )


class DSLHeadBank(nn.Module):
    """All projector/predictor pairs, keyed by (stream, stage).

    Stages are numbered 1..4. With ``dsl_enabled=False`` only stage 4 gets
    heads; with ``ctfm_enabled=False`` the fusion stream is absent. Fusion
    heads operate on (m + 1) * C_i wide vectors. ``identity_mode`` bypasses
    every head (debug aid for loss plumbing checks).
    """

    def __init__(
        self,
        stage_widths=STAGE_WIDTHS,
        m: int = 16,
        dsl_enabled: bool = True,
        ctfm_enabled: bool = True,
        identity_mode: bool = False,
    ):
        super().__init__()
        if m < 1:
            raise ValueError(f"m must be >= 1, got {m}")
        self.stage_widths = tuple(int(w) for w in stage_widths)
        self.m = int(m)
        self.dsl_enabled = bool(dsl_enabled)
        self.ctfm_enabled = bool(ctfm_enabled)
        self.identity_mode = bool(identity_mode)
        n_stages = len(self.stage_widths)
        self.active_stages = tuple(range(1, n_stages + 1)) if dsl_enabled else (n_stages,)
        self.active_streams = STREAMS if ctfm_enabled else STREAMS[:2]

        projectors = {}
        predictors = {}
        for stream in self.active_streams:
            for stage in self.active_stages:
                dim = self.head_dim(stage, stream)
                key = self._key(stage, stream)
                projectors[key] = make_projector(dim)
                predictors[key] = make_predictor(dim)
        self.projectors = nn.ModuleDict(projectors)
        self.predictors = nn.ModuleDict(predictors)

    @staticmethod
    def _key(stage: int, stream: str) -> str:
        return f"{stream}_s{stage}"

    def head_dim(self, stage: int, stream: str) -> int:
        width = self.stage_widths[stage - 1]
        return width * (self.m + 1) if stream == "fusion" else width

    @property
    def num_projectors(self) -> int:
        return len(self.projectors)

    @property
    def num_predictors(self) -> int:
        return len(self.predictors)

    def _lookup(self, table: nn.ModuleDict, x: torch.Tensor, stage: int, stream: str) -> nn.Module:
        if stream not in self.active_streams:
            raise ValueError(f"stream {stream!r} is not active (active: {self.active_streams})")
        if stage not in self.active_stages:
            raise ValueError(f"stage {stage} is not active (active: {self.active_stages})")
        expected = self.head_dim(stage, stream)
        if x.ndim != 2 or x.shape[1] != expected:
            raise ValueError(
                f"{stream} stage-{stage} head expects (B, {expected}) input, got {tuple(x.shape)}"
            )
        return table[self._key(stage, stream)]

    def project(self, x: torch.Tensor, stage: int, stream: str) -> torch.Tensor:
        head = self._lookup(self.projectors, x, stage, stream)
        return x if self.identity_mode else head(x)

    def predict(self, z: torch.Tensor, stage: int, stream: str) -> torch.Tensor:
        head = self._lookup(self.predictors, z, stage, stream)
        return z if self.identity_mode else head(z)


@dataclass
class LossReport:
    """Scalar breakdown of one training step (or an epoch mean)."""

    stage_losses: dict  # stream -> {stage: float}
    stage_weights: dict  # {stage: float}
    branch_losses: dict  # stream -> float, already stage-weighted
    total: float
    grad_norms: dict | None = None

    def validate(self, tol: float = 1e-6) -> None:
        """Check the recorded sums are internally consistent."""
        for stream, per_stage in self.stage_losses.items():
            expected = sum(self.stage_weights[s] * v for s, v in per_stage.items())
            got = self.branch_losses[stream]
            if abs(expected - got) > tol:
                raise ValueError(
                    f"{stream} branch loss {got} != weighted stage sum {expected} (tol {tol})"
                )
        total_expected = sum(self.branch_losses.values())
        if abs(total_expected - self.total) > tol:
            raise ValueError(f"total {self.total} != branch sum {total_expected} (tol {tol})")


def total_loss(stage_tensors: dict, stage_weights: dict):
    """Combine per-(stream, stage) scalar tensors into the optimized total.

    ``stage_tensors``: stream -> {stage: 0-dim tensor}. Returns the total as
    a tensor plus a float ``LossReport``. A non-finite stage scalar aborts
    immediately, naming the first offending stream and stage.
    """
    branch_tensors = {}
    report_stages = {}
    for stream in STREAMS:
        if stream not in stage_tensors:
            continue
        per_stage = stage_tensors[stream]
        for stage in sorted(per_stage):
            if not torch.isfinite(per_stage[stage]):
                raise RuntimeError(f"non-finite loss in stream '{stream}' at stage {stage}")
        branch_tensors[stream] = dsl_branch_loss(
            [per_stage[s] for s in sorted(per_stage)],
            [stage_weights[s] for s in sorted(per_stage)],
        )
        report_stages[stream] = {s: float(per_stage[s].detach()) for s in sorted(per_stage)}
    total = None
    for stream, tensor in branch_tensors.items():
        total = tensor if total is None else total + tensor
    if total is None:
        raise ValueError("no streams present in stage_tensors")
    report = LossReport(
        stage_losses=report_stages,
        stage_weights={s: float(w) for s, w in stage_weights.items()},
        branch_losses={k: float(v.detach()) for k, v in branch_tensors.items()},
        total=float(total.detach()),
    )
    return total, report
