"""Slide-level cross-validation folds and labeled-fraction subsampling.

Folds are assigned to whole slides, never to individual patches, so no pixels
from a validation slide can leak into training. Subsampling draws a fixed
prefix of one seeded permutation, which makes smaller fractions strict
subsets of larger ones at the same seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError

FOLDS_FILENAME = "folds.json"


@dataclass(frozen=True)
class FoldSpec:
    """Assignment of every slide to exactly one of k validation folds."""

    k: int
    seed: int
    slide_folds: dict  # slide_id -> fold index

    def validation_slides(self, fold: int) -> list:
        self._check_fold(fold)
        return sorted(s for s, f in self.slide_folds.items() if f == fold)

    def training_slides(self, fold: int) -> list:
        self._check_fold(fold)
        return sorted(s for s, f in self.slide_folds.items() if f != fold)

    def _check_fold(self, fold: int) -> None:
        if not 0 <= fold < self.k:
            raise ConfigError(f"fold {fold} out of range for k={self.k}")

    def select_groups(self, groups, fold: int, subset: str) -> list:
        """Filter groups by membership of their slide in the fold split."""
        if subset not in ("train", "val"):
            raise ConfigError(f"subset must be 'train' or 'val', got {subset!r}")
        wanted = set(self.validation_slides(fold) if subset == "val" else self.training_slides(fold))
        unknown = {g.slide_id for g in groups} - set(self.slide_folds)
        if unknown:
            raise ConfigError(f"groups reference slides missing from the fold split: {sorted(unknown)}")
        return [g for g in groups if g.slide_id in wanted]

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "slide_folds": dict(sorted(self.slide_folds.items()))}

    @classmethod
    def from_dict(cls, data: dict) -> "FoldSpec":
        return cls(k=int(data["k"]), seed=int(data["seed"]), slide_folds={str(s): int(f) for s, f in data["slide_folds"].items()})

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "FoldSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _slide_ids(groups_or_ids) -> list:
    ids = []
    for item in groups_or_ids:
        ids.append(item if isinstance(item, str) else item.slide_id)
    return sorted(set(ids))


def split_folds(groups_or_ids, k: int, seed: int) -> FoldSpec:
    """Partition slides into k folds of near-equal size (deterministic)."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    slides = _slide_ids(groups_or_ids)
    if len(slides) < k:
        raise ConfigError(f"cannot split {len(slides)} slide(s) into {k} folds")
    order = np.random.default_rng(seed).permutation(len(slides))
    assignments = {}
    for fold, chunk in enumerate(np.array_split(order, k)):
        for idx in chunk:
            assignments[slides[int(idx)]] = fold
    return FoldSpec(k=k, seed=seed, slide_folds=assignments)


def subsample_fraction(groups, fraction: float, seed: int) -> list:
    """Keep a deterministic ``round(fraction * N)``-sized subset of groups.

    The subset is the prefix of one seeded permutation, so for a fixed seed a
    smaller fraction always yields a subset of a larger one. Returned groups
    keep their original relative order.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    n = int(round(fraction * len(groups)))
    if fraction == 1.0 or n >= len(groups):
        return list(groups)
    order = np.random.default_rng(seed).permutation(len(groups))
    chosen = sorted(int(i) for i in order[:n])
    return [groups[i] for i in chosen]
