"""Torch dataset wrappers over a tiled patch directory.

A tiled directory is what the ``tile`` command produces::

    tiles/
      manifest.csv   folds.json   resolved_config.json
      patches/<patch_id>.png      labels/<patch_id>.png

Randomness (view augmentation, fusion plans, target subsampling) is derived
per (master seed, epoch, group, slot, view) so item content is reproducible
whatever the worker count or batch composition.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from ..augmentation import make_view_pair, normalize_image
from ..config import AugmentConfig, CtfmConfig, DslConfig
from ..ctfm import sample_fusion_plan
from ..errors import ConfigError
from ..seeding import derive_seed
from .manifest import read_manifest
from .splits import FOLDS_FILENAME, FoldSpec

NUM_WORKERS_ENV = "DSFWSI_NUM_WORKERS"


def resolve_num_workers() -> int:
    raw = os.environ.get(NUM_WORKERS_ENV, "0")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{NUM_WORKERS_ENV} must be an integer, got {raw!r}") from None
    if value < 0:
        raise ConfigError(f"{NUM_WORKERS_ENV} must be >= 0, got {value}")
    return value


class TiledPatchStore:
    """Resolves manifest records to pixel arrays on disk."""

    def __init__(self, manifest_path: str | Path):
        self.manifest_path = Path(manifest_path)
        self.root = self.manifest_path.parent
        self.groups = read_manifest(self.manifest_path)

    @property
    def m(self) -> int:
        if not self.groups:
            raise ValueError(f"manifest {self.manifest_path} holds no groups")
        return self.groups[0].m

    def load_folds(self) -> FoldSpec | None:
        path = self.root / FOLDS_FILENAME
        return FoldSpec.load(path) if path.exists() else None

    def image_path(self, patch_id: str) -> Path:
        return self.root / "patches" / f"{patch_id}.png"

    def load_image(self, patch_id: str) -> np.ndarray:
        path = self.image_path(patch_id)
        if not path.exists():
            raise FileNotFoundError(f"patch image missing: {path}")
        return np.asarray(Image.open(path).convert("RGB"))

    def load_label(self, record) -> np.ndarray:
        if record.label_path is None:
            raise ValueError(f"patch {record.patch_id} has no label")
        path = self.root / record.label_path
        if not path.exists():
            raise FileNotFoundError(f"label image missing: {path}")
        return np.asarray(Image.open(path)).astype(np.int64)


class PretrainGroupDataset(Dataset):
    """Items are whole groups: two augmented views of context + targets, plus
    one fusion plan per view."""

    def __init__(
        self,
        store: TiledPatchStore,
        groups,
        aug_cfg: AugmentConfig,
        ctfm_cfg: CtfmConfig,
        dsl_cfg: DslConfig,
        master_seed: int,
        targets_per_group: int | None = None,
    ):
        self.store = store
        self.groups = list(groups)
        self.aug_cfg = aug_cfg
        self.ctfm_cfg = ctfm_cfg
        self.dsl_cfg = dsl_cfg
        self.master_seed = int(master_seed)
        self.epoch = 0
        m = self.groups[0].m if self.groups else 0
        self.targets_per_group = int(targets_per_group) if targets_per_group else m
        if self.groups and self.targets_per_group > m:
            raise ConfigError(
                f"targets_per_group={self.targets_per_group} exceeds the dataset's m={m}"
            )

    def set_epoch(self, epoch: int) -> None:
        self.epoch = int(epoch)

    def __len__(self) -> int:
        return len(self.groups)

    def _sample_plan(self, group_id: str, view: int):
        plan_view = 0 if self.ctfm_cfg.share_plan_across_views else view
        seed = derive_seed(self.master_seed, "plan", self.epoch, group_id, plan_view)
        rng = np.random.default_rng(seed)
        return sample_fusion_plan(
            self.targets_per_group,
            self.ctfm_cfg.mask_ratio,
            rng,
            shuffle=not self.dsl_cfg.mask_only,
            mask=not self.dsl_cfg.jigsaw_only,
            seed=seed,
        )

    def __getitem__(self, index: int) -> dict:
        group = self.groups[index]
        gid = group.group_id

        if self.targets_per_group < group.m:
            sub_rng = np.random.default_rng(derive_seed(self.master_seed, "subset", self.epoch, gid))
            slots = sorted(int(s) for s in sub_rng.choice(group.m, size=self.targets_per_group, replace=False))
        else:
            slots = list(range(group.m))

        ctx_pair = make_view_pair(
            self.store.load_image(group.context.patch_id),
            self.aug_cfg,
            seed1=derive_seed(self.master_seed, "aug", self.epoch, gid, "ctx", 0),
            seed2=derive_seed(self.master_seed, "aug", self.epoch, gid, "ctx", 1),
            patch_id=group.context.patch_id,
        )
        target_views = []  # per slot: (view1, view2)
        for slot in slots:
            record = group.targets[slot]
            pair = make_view_pair(
                self.store.load_image(record.patch_id),
                self.aug_cfg,
                seed1=derive_seed(self.master_seed, "aug", self.epoch, gid, slot, 0),
                seed2=derive_seed(self.master_seed, "aug", self.epoch, gid, slot, 1),
                patch_id=record.patch_id,
            )
            target_views.append((pair.view1, pair.view2))

        context = torch.stack([ctx_pair.view1, ctx_pair.view2])  # (2, 3, S, S)
        targets = torch.stack(
            [torch.stack([tv[v] for tv in target_views]) for v in (0, 1)]
        )  # (2, t, 3, S, S)
        plans = (self._sample_plan(gid, 0), self._sample_plan(gid, 1))
        return {"context": context, "targets": targets, "plans": plans, "group_id": gid}


def collate_pretrain(items) -> dict:
    return {
        "context": torch.stack([it["context"] for it in items]),  # (B, 2, 3, S, S)
        "targets": torch.stack([it["targets"] for it in items]),  # (B, 2, t, 3, S, S)
        "plans": [it["plans"] for it in items],  # B pairs of FusionPlan
        "group_ids": [it["group_id"] for it in items],
    }


class SegmentationPairDataset(Dataset):
    """Items are (group, slot) pairs: normalized context and target images
    plus their class-index maps. No augmentation — supervised passes see the
    patches as tiled."""

    def __init__(self, store: TiledPatchStore, groups, mean=None, std=None):
        self.store = store
        self.pairs = []  # (group, slot)
        for group in groups:
            for slot in range(group.m):
                self.pairs.append((group, slot))
        self.mean = mean
        self.std = std

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, index: int) -> dict:
        group, slot = self.pairs[index]
        target = group.targets[slot]
        ctx_img = normalize_image(self.store.load_image(group.context.patch_id), self.mean, self.std)
        tgt_img = normalize_image(self.store.load_image(target.patch_id), self.mean, self.std)
        return {
            "context": ctx_img,
            "target": tgt_img,
            "context_label": torch.from_numpy(self.store.load_label(group.context)),
            "target_label": torch.from_numpy(self.store.load_label(target)),
            "patch_id": target.patch_id,
        }


def collate_pairs(items) -> dict:
    return {
        "context": torch.stack([it["context"] for it in items]),
        "target": torch.stack([it["target"] for it in items]),
        "context_label": torch.stack([it["context_label"] for it in items]),
        "target_label": torch.stack([it["target_label"] for it in items]),
        "patch_ids": [it["patch_id"] for it in items],
    }
