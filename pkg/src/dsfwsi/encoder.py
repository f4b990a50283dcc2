"""Dual unshared ResNet-18 trunks exposing per-stage feature maps.

The two branches see different magnifications (context = wide/low, target =
narrow/high), so they share topology but never parameters. The torchvision
trunk is re-wrapped to return all four residual-stage outputs and the
pre-pool stem activation; the classifier head is dropped entirely so
checkpoints carry no dead weights.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torchvision.models import resnet18

from .config import STAGE_WIDTHS

BRANCHES = ("context", "target")


class StageEncoder(nn.Module):
    """ResNet-18 without its classifier, reporting every stage's features.

    For a (B, 3, 224, 224) input the four stage outputs are
    (B, 64, 56, 56), (B, 128, 28, 28), (B, 256, 14, 14), (B, 512, 7, 7).
    """

    def __init__(self, bn_momentum: float = 0.1):
        super().__init__()
        net = resnet18(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu)
        self.pool = net.maxpool
        self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        for module in self.modules():
            if isinstance(module, nn.BatchNorm2d):
                module.momentum = bn_momentum

    def forward(self, x: torch.Tensor) -> list:
        return self.forward_with_stem(x)[1]

    def forward_with_stem(self, x: torch.Tensor):
        """Returns (stem activation at stride 2, [stage1..stage4 features])."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected a (B, 3, H, W) batch, got shape {tuple(x.shape)}")
        stem = self.stem(x)
        features = []
        out = self.pool(stem)
        for stage in self.stages:
            out = stage(out)
            features.append(out)
        return stem, features


def _build_trunk(seed: int, bn_momentum: float) -> StageEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return StageEncoder(bn_momentum=bn_momentum)


class DualBranchEncoder(nn.Module):
    """Two independently initialized trunks, one per magnification branch."""

    def __init__(self, seed: int = 0, bn_momentum: float = 0.1):
        super().__init__()
        ctx_ss, tgt_ss = np.random.SeedSequence([int(seed)]).spawn(2)
        self.context = _build_trunk(int(ctx_ss.generate_state(1)[0]), bn_momentum)
        self.target = _build_trunk(int(tgt_ss.generate_state(1)[0]), bn_momentum)
        self.seed = int(seed)

    def branch(self, name: str) -> StageEncoder:
        if name not in BRANCHES:
            raise ValueError(f"unknown branch {name!r}; expected one of {BRANCHES}")
        return getattr(self, name)

    def forward_stages(self, branch: str, batch: torch.Tensor) -> list:
        """Per-stage feature maps of one branch for a (B, 3, H, W) batch."""
        return self.branch(branch)(batch)

    @property
    def stage_widths(self) -> tuple:
        return STAGE_WIDTHS


def global_pool(feature_map: torch.Tensor) -> torch.Tensor:
    """Spatial mean: (B, C, H, W) -> (B, C)."""
    if feature_map.ndim != 4:
        raise ValueError(f"expected a (B, C, H, W) map, got shape {tuple(feature_map.shape)}")
    return feature_map.mean(dim=(2, 3))


def init_params(seed: int) -> DualBranchEncoder:
    """Fresh dual encoder; branches get distinct streams spawned from seed."""
    return DualBranchEncoder(seed=seed)
