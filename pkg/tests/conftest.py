"""Shared fixtures: one small synthetic dataset and a tiled copy of it.

Both are session-scoped; tests must treat them as read-only and copy
anything they want to mutate into their own tmp dirs.
"""

import pytest

from dsfwsi.config import SynthConfig, TilingConfig
from dsfwsi.data_pipeline import (
    TiledPatchStore,
    generate_synthetic_dataset,
    tile_dataset,
)

# 3 slides, 256px low level, x2 ratio -> 512px high level.
SYNTH_CFG = SynthConfig(slides=3, low_size=256, classes=3, ratio=2, seed=11)

# 128px contexts stepped without overlap, 64px targets -> a 2x2 target grid
# (m=4) and (256/128)^2 = 4 groups per slide, 12 groups total.
TILING_CFG = TilingConfig(
    context_window=128,
    context_step=128,
    target_window=64,
    target_step=64,
    output_size=224,
    min_tissue_fraction=0.1,
)
NUM_FOLDS = 3


@pytest.fixture(scope="session")
def synth_dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth_dataset")
    generate_synthetic_dataset(SYNTH_CFG, out)
    return out


@pytest.fixture(scope="session")
def tiles_dir(tmp_path_factory, synth_dataset_dir):
    out = tmp_path_factory.mktemp("tiles")
    tile_dataset(synth_dataset_dir, out, TILING_CFG, num_folds=NUM_FOLDS, seed=5)
    return out


@pytest.fixture(scope="session")
def store(tiles_dir):
    return TiledPatchStore(tiles_dir / "manifest.csv")
